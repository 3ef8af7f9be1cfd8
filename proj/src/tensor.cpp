#include "ctxopt/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <utility>

namespace ctxopt {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::shared_ptr<detail::Storage> make_storage(Shape shape, std::vector<float> data) {
    auto st = std::make_shared<detail::Storage>();
    if (shape_numel(shape) != data.size())
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    st->shape = std::move(shape);
    st->data = std::move(data);
    return st;
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

void require_rank(const Tensor& t, std::size_t r, const char* op) {
    if (t.rank() != r)
        throw ShapeError(std::string(op) + ": expected rank-" + std::to_string(r) +
                         " tensor, got shape " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

// Accumulates g into t's grad buffer if t participates in training.
void accum(const Tensor& t, const std::vector<float>& g) {
    Tensor copy = t;
    if (copy.requires_grad()) copy.accumulate_grad(g);
}

} // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// ---- Tensor --------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    Tensor t;
    t.s_ = make_storage(std::move(shape), std::vector<float>(n, 0.0f));
    t.s_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(Shape shape, float value) {
    const std::size_t n = shape_numel(shape);
    Tensor t;
    t.s_ = make_storage(std::move(shape), std::vector<float>(n, value));
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    Tensor t;
    t.s_ = make_storage(std::move(shape), std::move(data));
    t.s_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(float value) {
    return from_data({1}, {value});
}

Tensor Tensor::randn(Shape shape, Rng& rng, float sigma, bool requires_grad) {
    std::vector<float> d(shape_numel(shape));
    for (float& v : d) v = static_cast<float>(rng.normal(0.0, sigma));
    return from_data(std::move(shape), std::move(d), requires_grad);
}

float Tensor::item() const {
    if (!is_scalar())
        throw ContractError("item(): tensor is not scalar, shape " + shape_str(shape()));
    return storage().data[0];
}

void Tensor::set_requires_grad(bool v) {
    storage().requires_grad = v;
    if (!v) storage().grad.clear();
}

const std::vector<float>& Tensor::grad() const {
    detail::Storage& st = storage();
    if (!st.requires_grad)
        throw ContractError("grad(): tensor does not require grad");
    if (st.grad.empty()) st.grad.assign(st.data.size(), 0.0f);
    return st.grad;
}

void Tensor::zero_grad() {
    detail::Storage& st = storage();
    if (!st.grad.empty()) st.grad.assign(st.data.size(), 0.0f);
}

void Tensor::accumulate_grad(const std::vector<float>& g) {
    detail::Storage& st = storage();
    if (!st.requires_grad)
        throw ContractError("accumulate_grad on a tensor that does not require grad");
    if (g.size() != st.data.size())
        throw ShapeError("gradient length mismatch");
    if (st.grad.empty()) st.grad.assign(st.data.size(), 0.0f);
    for (std::size_t i = 0; i < g.size(); ++i) st.grad[i] += g[i];
}

// ---- Tape ----------------------------------------------------------------

Tape::Tape() : previous_(g_active_tape) {
    g_active_tape = this;
}

Tape::~Tape() {
    g_active_tape = previous_;
}

Tape* Tape::active() {
    return g_active_tape;
}

void Tape::record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
}

void Tape::run_backward(const Tensor& loss) {
    if (!loss.is_scalar())
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (loss.requires_grad()) {
        Tensor seed = loss;
        seed.accumulate_grad({1.0f});
    }
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (!tape) throw ContractError("backward: no active tape");
    tape->run_backward(loss);
}

// ---- op helpers ----------------------------------------------------------

namespace {

// Finalizes an op: marks the output as tracked and records the closure.
// out_grad() inside closures returns nullptr when the output never received
// gradient, letting dead branches short-circuit.
template <typename Fn>
Tensor finish(Tensor out, bool track, Fn&& backward_fn) {
    if (track) {
        out.set_requires_grad(true);
        Tape::active()->record(std::forward<Fn>(backward_fn));
    }
    return out;
}

const std::vector<float>* out_grad(const Tensor& out) {
    return out.has_grad() ? &out.grad() : nullptr;
}

} // namespace

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<float> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.at(i) + b.at(i);
    Tensor out = Tensor::from_data(a.shape(), std::move(y));
    return finish(out, tracking({&a, &b}), [a, b, out] {
        const auto* gy = out_grad(out);
        if (!gy) return;
        accum(a, *gy);
        accum(b, *gy);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<float> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.at(i) - b.at(i);
    Tensor out = Tensor::from_data(a.shape(), std::move(y));
    return finish(out, tracking({&a, &b}), [a, b, out] {
        const auto* gy = out_grad(out);
        if (!gy) return;
        accum(a, *gy);
        if (b.requires_grad()) {
            std::vector<float> gb(gy->size());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -(*gy)[i];
            accum(b, gb);
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<float> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.at(i) * b.at(i);
    Tensor out = Tensor::from_data(a.shape(), std::move(y));
    return finish(out, tracking({&a, &b}), [a, b, out] {
        const auto* gy = out_grad(out);
        if (!gy) return;
        if (a.requires_grad()) {
            std::vector<float> ga(gy->size());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = (*gy)[i] * b.at(i);
            accum(a, ga);
        }
        if (b.requires_grad()) {
            std::vector<float> gb(gy->size());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = (*gy)[i] * a.at(i);
            accum(b, gb);
        }
    });
}

Tensor scale(const Tensor& a, float c) {
    std::vector<float> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.at(i) * c;
    Tensor out = Tensor::from_data(a.shape(), std::move(y));
    return finish(out, tracking({&a}), [a, out, c] {
        const auto* gy = out_grad(out);
        if (!gy || !a.requires_grad()) return;
        std::vector<float> ga(gy->size());
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = (*gy)[i] * c;
        accum(a, ga);
    });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    require_rank(m, 2, "add_rowvec");
    require_rank(v, 1, "add_rowvec");
    const std::size_t r = m.rows(), c = m.cols();
    if (v.numel() != c)
        throw ShapeError("add_rowvec: vector length " + std::to_string(v.numel()) +
                         " vs matrix cols " + std::to_string(c));
    std::vector<float> y(m.numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) y[i * c + j] = m.at(i * c + j) + v.at(j);
    Tensor out = Tensor::from_data(m.shape(), std::move(y));
    return finish(out, tracking({&m, &v}), [m, v, out, r, c] {
        const auto* gy = out_grad(out);
        if (!gy) return;
        accum(m, *gy);
        if (v.requires_grad()) {
            std::vector<float> gv(c, 0.0f);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gv[j] += (*gy)[i * c + j];
            accum(v, gv);
        }
    });
}

// ---- matrix ops ------------------------------------------------------------

namespace {

// y[m x n] = a[m x k] . b[k x n], double accumulation
std::vector<float> mm(const std::vector<float>& a, const std::vector<float>& b,
                      std::size_t m, std::size_t k, std::size_t n) {
    std::vector<float> y(m * n, 0.0f);
    std::vector<double> row(n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) row[j] = 0.0;
        const float* ai = &a[i * k];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const float* bp = &b[p * n];
            for (std::size_t j = 0; j < n; ++j) row[j] += av * bp[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] = static_cast<float>(row[j]);
    }
    return y;
}

// y[m x n] = a[m x k] . b^T where b is [n x k]
std::vector<float> mm_nt(const std::vector<float>& a, const std::vector<float>& b,
                         std::size_t m, std::size_t k, std::size_t n) {
    std::vector<float> y(m * n, 0.0f);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            const float* ai = &a[i * k];
            const float* bj = &b[j * k];
            for (std::size_t p = 0; p < k; ++p) acc += double(ai[p]) * double(bj[p]);
            y[i * n + j] = static_cast<float>(acc);
        }
    return y;
}

// y[m x n] = a^T . b where a is [k x m], b is [k x n]
std::vector<float> mm_tn(const std::vector<float>& a, const std::vector<float>& b,
                         std::size_t k, std::size_t m, std::size_t n) {
    std::vector<float> y(m * n, 0.0f);
    std::vector<double> acc(m * n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const float* ap = &a[p * m];
        const float* bp = &b[p * n];
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ap[i];
            double* yi = &acc[i * n];
            for (std::size_t j = 0; j < n; ++j) yi[j] += av * bp[j];
        }
    }
    for (std::size_t i = 0; i < m * n; ++i) y[i] = static_cast<float>(acc[i]);
    return y;
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    if (b.shape()[0] != k)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " . " + shape_str(b.shape()));
    const std::size_t n = b.shape()[1];
    Tensor out = Tensor::from_data({m, n}, mm(a.data(), b.data(), m, k, n));
    return finish(out, tracking({&a, &b}), [a, b, out, m, k, n] {
        const auto* gy = out_grad(out);
        if (!gy) return;
        if (a.requires_grad()) accum(a, mm_nt(*gy, b.data(), m, n, k));
        if (b.requires_grad()) accum(b, mm_tn(a.data(), *gy, m, k, n));
    });
}

Tensor vecmat(const Tensor& v, const Tensor& m) {
    require_rank(v, 1, "vecmat");
    require_rank(m, 2, "vecmat");
    const std::size_t k = v.numel();
    if (m.shape()[0] != k)
        throw ShapeError("vecmat: vector length " + std::to_string(k) + " vs matrix " +
                         shape_str(m.shape()));
    const std::size_t n = m.shape()[1];
    std::vector<float> y = mm(v.data(), m.data(), 1, k, n);
    Tensor out = Tensor::from_data({n}, std::move(y));
    return finish(out, tracking({&v, &m}), [v, m, out, k, n] {
        const auto* gy = out_grad(out);
        if (!gy) return;
        if (v.requires_grad()) accum(v, mm_nt(*gy, m.data(), 1, n, k));
        if (m.requires_grad()) {
            std::vector<float> gm(k * n);
            for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < n; ++j) gm[i * n + j] = v.at(i) * (*gy)[j];
            accum(m, gm);
        }
    });
}

Tensor matvec(const Tensor& m, const Tensor& v) {
    require_rank(m, 2, "matvec");
    require_rank(v, 1, "matvec");
    const std::size_t r = m.shape()[0], c = m.shape()[1];
    if (v.numel() != c)
        throw ShapeError("matvec: matrix " + shape_str(m.shape()) + " vs vector length " +
                         std::to_string(v.numel()));
    std::vector<float> y(r);
    for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += double(m.at(i * c + j)) * double(v.at(j));
        y[i] = static_cast<float>(acc);
    }
    Tensor out = Tensor::from_data({r}, std::move(y));
    return finish(out, tracking({&m, &v}), [m, v, out, r, c] {
        const auto* gy = out_grad(out);
        if (!gy) return;
        if (m.requires_grad()) {
            std::vector<float> gm(r * c);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gm[i * c + j] = (*gy)[i] * v.at(j);
            accum(m, gm);
        }
        if (v.requires_grad()) {
            std::vector<float> gv(c, 0.0f);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gv[j] += (*gy)[i] * m.at(i * c + j);
            accum(v, gv);
        }
    });
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<float> y(a.numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) y[j * r + i] = a.at(i * c + j);
    Tensor out = Tensor::from_data({c, r}, std::move(y));
    return finish(out, tracking({&a}), [a, out, r, c] {
        const auto* gy = out_grad(out);
        if (!gy || !a.requires_grad()) return;
        std::vector<float> ga(r * c);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = (*gy)[j * r + i];
        accum(a, ga);
    });
}

// ---- nonlinearities --------------------------------------------------------

Tensor gelu(const Tensor& x) {
    constexpr float kAlpha = 0.7978845608028654f; // sqrt(2/pi)
    constexpr float kBeta = 0.044715f;
    std::vector<float> y(x.numel());
    for (std::size_t i = 0; i < y.size(); ++i) {
        const float v = x.at(i);
        const float u = kAlpha * (v + kBeta * v * v * v);
        y[i] = 0.5f * v * (1.0f + std::tanh(u));
    }
    Tensor out = Tensor::from_data(x.shape(), std::move(y));
    return finish(out, tracking({&x}), [x, out] {
        const auto* gy = out_grad(out);
        if (!gy || !x.requires_grad()) return;
        std::vector<float> gx(gy->size());
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const double v = x.at(i);
            const double u = 0.7978845608028654 * (v + 0.044715 * v * v * v);
            const double t = std::tanh(u);
            const double du = 0.7978845608028654 * (1.0 + 3.0 * 0.044715 * v * v);
            const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
            gx[i] = static_cast<float>((*gy)[i] * d);
        }
        accum(x, gx);
    });
}

namespace {

// softmax of one row with max subtraction; writes into y
void softmax_row(const float* x, float* y, std::size_t n, const char* op) {
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(x[i]))
            throw NumericError(std::string(op) + ": non-finite input");
        if (x[i] > mx) mx = x[i];
    }
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(double(x[i]) - double(mx));
        y[i] = static_cast<float>(e);
        z += e;
    }
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<float>(double(y[i]) / z);
}

// gx = y * (gy - sum(gy * y)) for one row
void softmax_row_backward(const float* y, const float* gy, float* gx, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += double(gy[i]) * double(y[i]);
    for (std::size_t i = 0; i < n; ++i)
        gx[i] = static_cast<float>(double(y[i]) * (double(gy[i]) - s));
}

} // namespace

Tensor softmax(const Tensor& x) {
    require_rank(x, 1, "softmax");
    if (x.numel() == 0) throw ShapeError("softmax: empty input");
    std::vector<float> y(x.numel());
    softmax_row(x.data().data(), y.data(), x.numel(), "softmax");
    Tensor out = Tensor::from_data(x.shape(), std::move(y));
    return finish(out, tracking({&x}), [x, out] {
        const auto* gy = out_grad(out);
        if (!gy || !x.requires_grad()) return;
        std::vector<float> gx(gy->size());
        softmax_row_backward(out.data().data(), gy->data(), gx.data(), gx.size());
        accum(x, gx);
    });
}

Tensor softmax_rows(const Tensor& x) {
    require_rank(x, 2, "softmax_rows");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<float> y(x.numel());
    for (std::size_t i = 0; i < r; ++i)
        softmax_row(&x.data()[i * c], &y[i * c], c, "softmax_rows");
    Tensor out = Tensor::from_data(x.shape(), std::move(y));
    return finish(out, tracking({&x}), [x, out, r, c] {
        const auto* gy = out_grad(out);
        if (!gy || !x.requires_grad()) return;
        std::vector<float> gx(gy->size());
        for (std::size_t i = 0; i < r; ++i)
            softmax_row_backward(&out.data()[i * c], &(*gy)[i * c], &gx[i * c], c);
        accum(x, gx);
    });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    if (x.rank() < 1 || x.rank() > 2) throw ShapeError("layernorm: rank-1 or rank-2 input only");
    require_rank(gain, 1, "layernorm");
    require_rank(bias, 1, "layernorm");
    const std::size_t d = x.cols();
    if (gain.numel() != d || bias.numel() != d)
        throw ShapeError("layernorm: gain/bias length must match last axis " + std::to_string(d));
    const std::size_t r = x.rows();
    std::vector<float> y(x.numel());
    std::vector<float> xhat(x.numel());
    std::vector<float> inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        const float* xi = &x.data()[i * d];
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xi[j];
        mu /= double(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double dv = double(xi[j]) - mu;
            var += dv * dv;
        }
        var /= double(d);
        const double is = 1.0 / std::sqrt(var + double(eps));
        inv_std[i] = static_cast<float>(is);
        for (std::size_t j = 0; j < d; ++j) {
            const float xh = static_cast<float>((double(xi[j]) - mu) * is);
            xhat[i * d + j] = xh;
            y[i * d + j] = gain.at(j) * xh + bias.at(j);
        }
    }
    Tensor out = Tensor::from_data(x.shape(), std::move(y));
    auto xhat_keep = std::make_shared<std::vector<float>>(std::move(xhat));
    auto istd_keep = std::make_shared<std::vector<float>>(std::move(inv_std));
    return finish(out, tracking({&x, &gain, &bias}), [x, gain, bias, out, xhat_keep, istd_keep, r, d] {
        const auto* gy = out_grad(out);
        if (!gy) return;
        const auto& xh = *xhat_keep;
        if (x.requires_grad()) {
            std::vector<float> gx(x.numel());
            for (std::size_t i = 0; i < r; ++i) {
                double mean_g = 0.0, mean_gx = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double gh = double((*gy)[i * d + j]) * double(gain.at(j));
                    mean_g += gh;
                    mean_gx += gh * double(xh[i * d + j]);
                }
                mean_g /= double(d);
                mean_gx /= double(d);
                const double is = (*istd_keep)[i];
                for (std::size_t j = 0; j < d; ++j) {
                    const double gh = double((*gy)[i * d + j]) * double(gain.at(j));
                    gx[i * d + j] = static_cast<float>(
                        is * (gh - mean_g - double(xh[i * d + j]) * mean_gx));
                }
            }
            accum(x, gx);
        }
        if (gain.requires_grad()) {
            std::vector<float> gg(d, 0.0f);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < d; ++j) gg[j] += (*gy)[i * d + j] * xh[i * d + j];
            accum(gain, gg);
        }
        if (bias.requires_grad()) {
            std::vector<float> gb(d, 0.0f);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < d; ++j) gb[j] += (*gy)[i * d + j];
            accum(bias, gb);
        }
    });
}

// ---- gather / slicing -------------------------------------------------------

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    require_rank(table, 2, "gather_rows");
    const std::size_t v = table.shape()[0], d = table.shape()[1];
    std::vector<float> y(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
            throw ContractError("gather_rows: id " + std::to_string(ids[i]) +
                                " out of range [0, " + std::to_string(v) + ")");
        const float* src = &table.data()[static_cast<std::size_t>(ids[i]) * d];
        std::copy(src, src + d, &y[i * d]);
    }
    Tensor out = Tensor::from_data({ids.size(), d}, std::move(y));
    return finish(out, tracking({&table}), [table, out, ids, v, d] {
        const auto* gy = out_grad(out);
        if (!gy || !table.requires_grad()) return;
        std::vector<float> gt(v * d, 0.0f);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            float* dst = &gt[static_cast<std::size_t>(ids[i]) * d];
            for (std::size_t j = 0; j < d; ++j) dst[j] += (*gy)[i * d + j];
        }
        accum(table, gt);
    });
}

Tensor take_row(const Tensor& x, std::size_t row) {
    require_rank(x, 2, "take_row");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    if (row >= r)
        throw ContractError("take_row: row " + std::to_string(row) + " out of range [0, " +
                            std::to_string(r) + ")");
    std::vector<float> y(x.data().begin() + row * c, x.data().begin() + (row + 1) * c);
    Tensor out = Tensor::from_data({c}, std::move(y));
    return finish(out, tracking({&x}), [x, out, row, r, c] {
        const auto* gy = out_grad(out);
        if (!gy || !x.requires_grad()) return;
        std::vector<float> gx(r * c, 0.0f);
        std::copy(gy->begin(), gy->end(), gx.begin() + row * c);
        accum(x, gx);
    });
}

Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    if (x.rank() < 2) throw ShapeError("slice_rows: rank >= 2 required");
    const std::size_t r = x.rows(), c = x.cols();
    if (r0 > r1 || r1 > r)
        throw ContractError("slice_rows: range [" + std::to_string(r0) + ", " +
                            std::to_string(r1) + ") out of " + std::to_string(r) + " rows");
    std::vector<float> y(x.data().begin() + r0 * c, x.data().begin() + r1 * c);
    Tensor out = Tensor::from_data({r1 - r0, c}, std::move(y));
    return finish(out, tracking({&x}), [x, out, r0, r, c] {
        const auto* gy = out_grad(out);
        if (!gy || !x.requires_grad()) return;
        std::vector<float> gx(r * c, 0.0f);
        std::copy(gy->begin(), gy->end(), gx.begin() + r0 * c);
        accum(x, gx);
    });
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    require_rank(x, 2, "slice_cols");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    if (c0 > c1 || c1 > c)
        throw ContractError("slice_cols: range [" + std::to_string(c0) + ", " +
                            std::to_string(c1) + ") out of " + std::to_string(c) + " cols");
    const std::size_t w = c1 - c0;
    std::vector<float> y(r * w);
    for (std::size_t i = 0; i < r; ++i)
        std::copy(&x.data()[i * c + c0], &x.data()[i * c + c1], &y[i * w]);
    Tensor out = Tensor::from_data({r, w}, std::move(y));
    return finish(out, tracking({&x}), [x, out, c0, r, c, w] {
        const auto* gy = out_grad(out);
        if (!gy || !x.requires_grad()) return;
        std::vector<float> gx(r * c, 0.0f);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) gx[i * c + c0 + j] = (*gy)[i * w + j];
        accum(x, gx);
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const std::size_t c = parts[0].cols();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2)
            throw ShapeError("concat_rows: all parts must be rank-2, got " + shape_str(p.shape()));
        if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
        total += p.rows();
    }
    std::vector<float> y;
    y.reserve(total * c);
    for (const Tensor& p : parts) y.insert(y.end(), p.data().begin(), p.data().end());
    Tensor out = Tensor::from_data({total, c}, std::move(y));
    bool track = false;
    for (const Tensor& p : parts) track = track || (Tape::active() && p.requires_grad());
    return finish(out, track, [parts, out, c] {
        const auto* gy = out_grad(out);
        if (!gy) return;
        std::size_t offset = 0;
        for (const Tensor& p : parts) {
            const std::size_t n = p.numel();
            if (p.requires_grad())
                accum(p, std::vector<float>(gy->begin() + offset, gy->begin() + offset + n));
            offset += n;
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2)
            throw ShapeError("concat_cols: all parts must be rank-2, got " + shape_str(p.shape()));
        if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
        total += p.cols();
    }
    std::vector<float> y(r * total);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.cols();
        for (std::size_t i = 0; i < r; ++i)
            std::copy(&p.data()[i * w], &p.data()[i * w + w], &y[i * total + off]);
        off += w;
    }
    Tensor out = Tensor::from_data({r, total}, std::move(y));
    bool track = false;
    for (const Tensor& p : parts) track = track || (Tape::active() && p.requires_grad());
    return finish(out, track, [parts, out, r, total] {
        const auto* gy = out_grad(out);
        if (!gy) return;
        std::size_t off = 0;
        for (const Tensor& p : parts) {
            const std::size_t w = p.cols();
            if (p.requires_grad()) {
                std::vector<float> gp(r * w);
                for (std::size_t i = 0; i < r; ++i)
                    std::copy(&(*gy)[i * total + off], &(*gy)[i * total + off + w], &gp[i * w]);
                accum(p, gp);
            }
            off += w;
        }
    });
}

Tensor stack_scalars(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("stack_scalars: no inputs");
    std::vector<float> y(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!xs[i].is_scalar()) throw ShapeError("stack_scalars: non-scalar input");
        y[i] = xs[i].item();
    }
    Tensor out = Tensor::from_data({xs.size()}, std::move(y));
    bool track = false;
    for (const Tensor& p : xs) track = track || (Tape::active() && p.requires_grad());
    return finish(out, track, [xs, out] {
        const auto* gy = out_grad(out);
        if (!gy) return;
        for (std::size_t i = 0; i < xs.size(); ++i)
            if (xs[i].requires_grad()) accum(xs[i], {(*gy)[i]});
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    if (n != x.numel())
        throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
    Tensor out = Tensor::from_data(std::move(shape), x.data());
    return finish(out, tracking({&x}), [x, out] {
        const auto* gy = out_grad(out);
        if (!gy || !x.requires_grad()) return;
        accum(x, *gy);
    });
}

// ---- reductions / norms ------------------------------------------------------

Tensor l2_normalize(const Tensor& v) {
    require_rank(v, 1, "l2_normalize");
    double ss = 0.0;
    for (std::size_t i = 0; i < v.numel(); ++i) ss += double(v.at(i)) * double(v.at(i));
    const double norm = std::sqrt(ss);
    if (!(norm > 0.0) || !std::isfinite(norm))
        throw NumericError("l2_normalize: zero or non-finite norm");
    std::vector<float> y(v.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<float>(double(v.at(i)) / norm);
    Tensor out = Tensor::from_data(v.shape(), std::move(y));
    return finish(out, tracking({&v}), [v, out, norm] {
        const auto* gy = out_grad(out);
        if (!gy || !v.requires_grad()) return;
        double proj = 0.0;
        for (std::size_t i = 0; i < gy->size(); ++i) proj += double((*gy)[i]) * double(out.at(i));
        std::vector<float> gv(gy->size());
        for (std::size_t i = 0; i < gv.size(); ++i)
            gv[i] = static_cast<float>((double((*gy)[i]) - double(out.at(i)) * proj) / norm);
        accum(v, gv);
    });
}

Tensor dot(const Tensor& a, const Tensor& b) {
    require_rank(a, 1, "dot");
    require_rank(b, 1, "dot");
    require_same_shape(a, b, "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += double(a.at(i)) * double(b.at(i));
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    return finish(out, tracking({&a, &b}), [a, b, out] {
        const auto* gy = out_grad(out);
        if (!gy) return;
        const float g = (*gy)[0];
        if (a.requires_grad()) {
            std::vector<float> ga(a.numel());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g * b.at(i);
            accum(a, ga);
        }
        if (b.requires_grad()) {
            std::vector<float> gb(b.numel());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g * a.at(i);
            accum(b, gb);
        }
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x.at(i);
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    return finish(out, tracking({&x}), [x, out] {
        const auto* gy = out_grad(out);
        if (!gy || !x.requires_grad()) return;
        accum(x, std::vector<float>(x.numel(), (*gy)[0]));
    });
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw ShapeError("mean: empty tensor");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x.at(i);
    const float inv = 1.0f / static_cast<float>(x.numel());
    Tensor out = Tensor::scalar(static_cast<float>(acc / double(x.numel())));
    return finish(out, tracking({&x}), [x, out, inv] {
        const auto* gy = out_grad(out);
        if (!gy || !x.requires_grad()) return;
        accum(x, std::vector<float>(x.numel(), (*gy)[0] * inv));
    });
}

// ---- losses -------------------------------------------------------------------

namespace {

// log-sum-exp with max subtraction; also writes softmax probabilities
double lse_and_probs(const float* z, std::size_t n, std::vector<float>& probs) {
    float mx = z[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, z[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(double(z[i]) - double(mx));
    const double lse = double(mx) + std::log(s);
    probs.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        probs[i] = static_cast<float>(std::exp(double(z[i]) - lse));
    return lse;
}

} // namespace

Tensor cross_entropy_logits(const Tensor& logits, int label) {
    require_rank(logits, 1, "cross_entropy_logits");
    const std::size_t k = logits.numel();
    if (label < 0 || static_cast<std::size_t>(label) >= k)
        throw ContractError("cross_entropy_logits: label " + std::to_string(label) +
                            " out of range [0, " + std::to_string(k) + ")");
    std::vector<float> probs;
    const double lse = lse_and_probs(logits.data().data(), k, probs);
    Tensor out = Tensor::scalar(static_cast<float>(lse - double(logits.at(label))));
    auto probs_keep = std::make_shared<std::vector<float>>(std::move(probs));
    return finish(out, tracking({&logits}), [logits, out, probs_keep, label] {
        const auto* gy = out_grad(out);
        if (!gy || !logits.requires_grad()) return;
        std::vector<float> gz(*probs_keep);
        gz[static_cast<std::size_t>(label)] -= 1.0f;
        for (float& g : gz) g *= (*gy)[0];
        accum(logits, gz);
    });
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& labels) {
    require_rank(logits, 2, "cross_entropy_rows");
    const std::size_t b = logits.shape()[0], k = logits.shape()[1];
    if (labels.size() != b)
        throw ShapeError("cross_entropy_rows: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(b) + " rows");
    std::vector<float> all_probs(b * k);
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
            throw ContractError("cross_entropy_rows: label out of range at row " +
                                std::to_string(i));
        std::vector<float> probs;
        const double lse = lse_and_probs(&logits.data()[i * k], k, probs);
        std::copy(probs.begin(), probs.end(), &all_probs[i * k]);
        total += lse - double(logits.at(i * k + static_cast<std::size_t>(labels[i])));
    }
    Tensor out = Tensor::scalar(static_cast<float>(total / double(b)));
    auto probs_keep = std::make_shared<std::vector<float>>(std::move(all_probs));
    return finish(out, tracking({&logits}), [logits, out, probs_keep, labels, b, k] {
        const auto* gy = out_grad(out);
        if (!gy || !logits.requires_grad()) return;
        std::vector<float> gz(*probs_keep);
        for (std::size_t i = 0; i < b; ++i)
            gz[i * k + static_cast<std::size_t>(labels[i])] -= 1.0f;
        const float s = (*gy)[0] / static_cast<float>(b);
        for (float& g : gz) g *= s;
        accum(logits, gz);
    });
}

// ---- attention ------------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t heads, bool causal) {
    require_rank(q, 2, "attention");
    require_same_shape(q, k, "attention");
    if (v.rank() != 2 || v.shape()[0] != q.shape()[0])
        throw ShapeError("attention: v row count must match q");
    const std::size_t L = q.shape()[0], d = q.shape()[1], dv = v.shape()[1];
    if (heads == 0 || d % heads != 0 || dv % heads != 0)
        throw ShapeError("attention: head count " + std::to_string(heads) +
                         " must divide widths " + std::to_string(d) + "/" + std::to_string(dv));
    const std::size_t dh = d / heads, dvh = dv / heads;
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

    Tensor mask;
    if (causal) {
        std::vector<float> m(L * L, 0.0f);
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = i + 1; j < L; ++j) m[i * L + j] = -1e9f;
        mask = Tensor::from_data({L, L}, std::move(m));
    }

    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dvh, (h + 1) * dvh);
        Tensor scores = scale(matmul(qh, transpose(kh)), att_scale);
        if (causal) scores = add(scores, mask);
        Tensor probs = softmax_rows(scores);
        outs.push_back(matmul(probs, vh));
    }
    return concat_cols(outs);
}

} // namespace ctxopt
