// Dense float32 tensors with reverse-mode automatic differentiation.
//
// Tensors are cheap shared handles. Ops run eagerly; when a Tape is active
// and an input requires grad, the op records a backward closure. backward()
// seeds the loss gradient and replays the tape in reverse recording order.
// The tape is rebuilt each training step (define-by-run, no graph caching).
//
// Everything is single-threaded per tape; tensors detached from an active
// tape may be shared read-only across threads. Reductions and matrix inner
// loops accumulate in double and store float, which keeps the forward pass
// deterministic and the finite-difference checks tight in single precision.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "ctxopt/error.hpp"
#include "ctxopt/rng.hpp"

namespace ctxopt {

using Shape = std::vector<std::size_t>;

namespace detail {
struct Storage {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad; // empty until a backward pass touches it
    bool requires_grad = false;
};
} // namespace detail

std::string shape_str(const Shape& s);

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float value);
    static Tensor randn(Shape shape, Rng& rng, float sigma, bool requires_grad = false);

    bool defined() const { return s_ != nullptr; }
    const Shape& shape() const { return storage().shape; }
    std::size_t rank() const { return storage().shape.size(); }
    std::size_t numel() const { return storage().data.size(); }
    // Merged-leading-axes view: rows() * cols() == numel() for rank >= 1.
    std::size_t cols() const { return storage().shape.empty() ? 1 : storage().shape.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }
    bool is_scalar() const { return numel() == 1 && rank() <= 1; }
    float item() const;

    const std::vector<float>& data() const { return storage().data; }
    std::vector<float>& mutable_data() { return storage().data; }
    float at(std::size_t i) const { return storage().data[i]; }

    bool requires_grad() const { return s_ && s_->requires_grad; }
    void set_requires_grad(bool v);
    bool has_grad() const { return s_ && !s_->grad.empty(); }
    // Gradient of a requires-grad tensor; zeros if nothing was accumulated.
    const std::vector<float>& grad() const;
    void zero_grad();
    void accumulate_grad(const std::vector<float>& g);

    // Identity of the underlying storage, for aliasing checks in tests.
    const void* id() const { return s_.get(); }

private:
    detail::Storage& storage() const {
        if (!s_) throw ContractError("use of undefined tensor");
        return *s_;
    }
    std::shared_ptr<detail::Storage> s_;
};

// Define-by-run gradient tape. Constructing a Tape makes it the active tape
// for the current thread; destruction restores the previous one.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void record(std::function<void()> backward_fn);
    std::size_t recorded_ops() const { return ops_.size(); }

    // Seeds d loss/d loss = 1 and replays every recorded op in reverse
    // order. Ops not on the path from loss see a zero output gradient and
    // contribute nothing.
    void run_backward(const Tensor& loss);

private:
    std::vector<std::function<void()>> ops_;
    Tape* previous_ = nullptr;
};

// Backward through the active tape. Contract: loss is scalar and a tape is active.
void backward(const Tensor& loss);

// ---- differentiable ops -------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
// m is [r x c], v is [c]; adds v to every row of m.
Tensor add_rowvec(const Tensor& m, const Tensor& v);
Tensor matmul(const Tensor& a, const Tensor& b);
// v[k] . m[k x n] -> [n]
Tensor vecmat(const Tensor& v, const Tensor& m);
// m[r x c] . v[c] -> [r]
Tensor matvec(const Tensor& m, const Tensor& v);
Tensor transpose(const Tensor& a);
// tanh-approximation GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
Tensor gelu(const Tensor& x);
// rank-1 softmax with max subtraction; inputs must be finite
Tensor softmax(const Tensor& x);
// independent softmax over each row of a rank-2 tensor
Tensor softmax_rows(const Tensor& x);
// normalizes over the last axis, then applies gain/bias (both [d])
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);
// row gather from table[V x d]; backward scatter-adds into the table
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor take_row(const Tensor& x, std::size_t row);
// merged-leading-axes row slice: rows [r0, r1) of the rows() x cols() view
Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor stack_scalars(const std::vector<Tensor>& xs);
Tensor reshape(const Tensor& x, Shape shape);
Tensor l2_normalize(const Tensor& v);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// -log softmax(logits)[label], computed in log-space
Tensor cross_entropy_logits(const Tensor& logits, int label);
// mean cross-entropy over rows of logits[B x K]
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& labels);
// multi-head scaled dot-product attention over q,k,v: [L x d] each.
// Composed from the primitives above, so its backward needs no special rule.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t heads, bool causal);

} // namespace ctxopt
