#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mfl/error.hpp"
#include "mfl/rng.hpp"

namespace mfl {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty unless requires_grad and touched
    bool requires_grad = false;
};

}  // namespace detail

// Dense row-major tensor of 64-bit reals. Copying a Tensor copies the handle;
// use clone()/detach() for an independent value snapshot.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from_data(Shape shape, std::vector<double> data);
    static Tensor scalar(double value) { return from_data({1}, {value}); }
    // Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); rows = fan_in.
    static Tensor glorot_uniform(Shape shape, Rng& rng);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::int64_t numel() const;
    std::int64_t dim(std::size_t axis) const;
    std::size_t ndim() const { return shape().size(); }

    // Span accessors are lvalue-only: a span taken from a temporary handle
    // would dangle once the handle drops the last reference.
    std::span<const double> data() const&;
    std::span<const double> data() const&& = delete;
    std::span<double> mutable_data() &;
    std::span<double> mutable_data() && = delete;
    double item() const;  // requires numel() == 1
    double at(std::int64_t i) const;
    double at(std::int64_t i, std::int64_t j) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool value);
    bool has_grad() const;
    std::span<const double> grad() const&;  // StateError if absent
    std::span<const double> grad() const&& = delete;
    std::span<double> mutable_grad() &;  // allocates zeros if absent
    std::span<double> mutable_grad() && = delete;
    void zero_grad();

    // Value snapshot without grad or recording history.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    detail::TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Recorded primitive kinds; the op set is closed, everything else is composed.
enum class OpKind {
    MatMul,       // iargs: [ta, tb]
    Add,          // same shape
    AddBias,      // trailing-axis broadcast
    Mul,          // elementwise, same shape
    SMul,         // tensor * scalar tensor
    Scale,        // dargs: [c]
    Relu,
    Gelu,         // tanh approximation
    Softmax,      // iargs: [axis]
    Log,
    SliceLast,    // iargs: [start, len]
    ConcatLast,
    GatherCols,   // iargs: per-row column indices, row-major [n, k]
    TakeRows,     // iargs: row indices; also serves as embedding lookup
    ScatterRows,  // iargs: [n_rows, row indices...]
    ScaleRows,    // x[N,d] * s[N] rowwise
    Sum,
    Mean,
};

// Define-by-run record of primitive operations; consumed by backward().
class ComputationRecord {
public:
    ComputationRecord() = default;
    ComputationRecord(const ComputationRecord&) = delete;
    ComputationRecord& operator=(const ComputationRecord&) = delete;

    struct Node {
        OpKind kind;
        std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
        std::shared_ptr<detail::TensorImpl> output;
        std::vector<std::int64_t> iargs;
        std::vector<double> dargs;
    };

    void record(Node node);
    bool contains(const detail::TensorImpl* impl) const;
    bool is_leaf(const detail::TensorImpl* impl) const { return !contains(impl); }
    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    // Reverse sweep from `loss`; accumulates into trainable leaves and
    // clears the record.
    void backward_from(const Tensor& loss);

private:
    std::vector<Node> nodes_;
    std::vector<const detail::TensorImpl*> outputs_;  // parallel to nodes_
    bool consumed_ = false;
};

// RAII activation of a record; ops record into the innermost active one.
class RecordScope {
public:
    explicit RecordScope(ComputationRecord& record);
    ~RecordScope();
    RecordScope(const RecordScope&) = delete;
    RecordScope& operator=(const RecordScope&) = delete;

private:
    ComputationRecord* previous_;
};

// Suspends recording for the current scope; ops run as plain arithmetic.
class NoRecordScope {
public:
    NoRecordScope();
    ~NoRecordScope();
    NoRecordScope(const NoRecordScope&) = delete;
    NoRecordScope& operator=(const NoRecordScope&) = delete;

private:
    ComputationRecord* previous_;
};

ComputationRecord* active_record();

// ---- primitive ops ----
// All ops evaluate eagerly; they record into the active ComputationRecord
// when one is installed, and run as plain arithmetic otherwise.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T * b
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor smul(const Tensor& x, const Tensor& scalar);
Tensor scale(const Tensor& x, double c);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, std::int64_t axis = -1);
Tensor log_(const Tensor& x);
Tensor slice_last(const Tensor& x, std::int64_t start, std::int64_t len);
Tensor concat_last(std::span<const Tensor> parts);
Tensor gather_cols(const Tensor& x, std::span<const std::int64_t> cols, std::int64_t k = 1);
Tensor take_rows(const Tensor& x, std::span<const std::int64_t> rows);
Tensor scatter_rows(const Tensor& x, std::span<const std::int64_t> rows, std::int64_t n_rows);
Tensor scale_rows(const Tensor& x, const Tensor& s);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> ids);

// Composed: mean over rows of -log softmax(logits)[target].
// Returns the scalar loss; per-row losses available via cross_entropy_per_row.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets);
Tensor cross_entropy_per_row(const Tensor& logits, std::span<const std::int64_t> targets);

// Reverse sweep over the active record; contract error on non-scalar loss,
// state error when no active record (or the record was already consumed).
void backward(const Tensor& loss);

// Central-difference gradient oracle: (f(x+de_i) - f(x-de_i)) / 2d.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double step = 1e-5);

double max_rel_err(std::span<const double> a, std::span<const double> b);

}  // namespace mfl
