#include "mfl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace mfl {

namespace {

constexpr double kGeluCoef = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

thread_local ComputationRecord* g_active_record = nullptr;

void check(bool cond, const char* what, const std::string& detail) {
    if (!cond) throw ShapeError(std::string(what) + ": " + detail);
}

// C[M x N] += A_eff[M x K] * B_eff[K x N], where A_eff/B_eff are the stored
// matrices possibly transposed. Loop orders keep the inner loop contiguous.
void gemm_acc(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
              const double* a, const double* b, double* c) {
    if (!ta && !tb) {
        for (std::int64_t i = 0; i < m; ++i) {
            double* ci = c + i * n;
            const double* ai = a + i * k;
            std::int64_t p = 0;
            for (; p + 1 < k; p += 2) {
                const double a0 = ai[p], a1 = ai[p + 1];
                const double* b0 = b + p * n;
                const double* b1 = b0 + n;
                for (std::int64_t j = 0; j < n; ++j) ci[j] += a0 * b0[j] + a1 * b1[j];
            }
            for (; p < k; ++p) {
                const double av = ai[p];
                const double* bp = b + p * n;
                for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else if (!ta && tb) {  // B stored as [N x K]
        for (std::int64_t i = 0; i < m; ++i) {
            const double* ai = a + i * k;
            double* ci = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                const double* bj = b + j * k;
                double acc = 0.0;
                for (std::int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
                ci[j] += acc;
            }
        }
    } else if (ta && !tb) {  // A stored as [K x M]
        std::int64_t p = 0;
        for (; p + 1 < k; p += 2) {
            const double* a0 = a + p * m;
            const double* a1 = a0 + m;
            const double* b0 = b + p * n;
            const double* b1 = b0 + n;
            for (std::int64_t i = 0; i < m; ++i) {
                const double v0 = a0[i], v1 = a1[i];
                double* ci = c + i * n;
                for (std::int64_t j = 0; j < n; ++j) ci[j] += v0 * b0[j] + v1 * b1[j];
            }
        }
        for (; p < k; ++p) {
            const double* ap = a + p * m;
            const double* bp = b + p * n;
            for (std::int64_t i = 0; i < m; ++i) {
                const double av = ap[i];
                double* ci = c + i * n;
                for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else {  // A [K x M], B [N x K]
        for (std::int64_t i = 0; i < m; ++i) {
            double* ci = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                const double* bj = b + j * k;
                double acc = 0.0;
                for (std::int64_t p = 0; p < k; ++p) acc += a[p * m + i] * bj[p];
                ci[j] += acc;
            }
        }
    }
}

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return impl;
}

struct AxisSplit {
    std::int64_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, std::int64_t axis) {
    const auto nd = static_cast<std::int64_t>(shape.size());
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ShapeError("softmax: axis out of range");
    AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
    for (std::int64_t i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    for (std::int64_t i = axis + 1; i < nd; ++i) s.inner *= shape[static_cast<std::size_t>(i)];
    return s;
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (const auto d : shape) {
        if (d <= 0) throw ShapeError("shape extents must be positive, got " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return Tensor(make_impl(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0)));
}

Tensor Tensor::full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(make_impl(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value)));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    const auto n = shape_numel(shape);
    if (n != static_cast<std::int64_t>(data.size()))
        throw ShapeError("from_data: " + shape_str(shape) + " needs " + std::to_string(n) +
                         " values, got " + std::to_string(data.size()));
    return Tensor(make_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::glorot_uniform(Shape shape, Rng& rng) {
    if (shape.size() != 2) throw ShapeError("glorot_uniform: expects a matrix shape");
    const double a = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
    const auto n = shape_numel(shape);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = rng.uniform(-a, a);
    return Tensor(make_impl(std::move(shape), std::move(data)));
}

const Shape& Tensor::shape() const {
    if (!impl_) throw StateError("tensor is undefined");
    return impl_->shape;
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(data().size()); }

std::int64_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw ShapeError("dim: axis out of range for " + shape_str(s));
    return s[axis];
}

std::span<const double> Tensor::data() const& {
    if (!impl_) throw StateError("tensor is undefined");
    return impl_->data;
}

std::span<double> Tensor::mutable_data() & {
    if (!impl_) throw StateError("tensor is undefined");
    return impl_->data;
}

double Tensor::item() const {
    const auto d = data();
    if (d.size() != 1) throw ShapeError("item: tensor has " + std::to_string(d.size()) + " elements");
    return d[0];
}

double Tensor::at(std::int64_t i) const {
    const auto d = data();
    if (i < 0 || i >= static_cast<std::int64_t>(d.size())) throw IndexError("at: index out of range");
    return d[static_cast<std::size_t>(i)];
}

double Tensor::at(std::int64_t i, std::int64_t j) const {
    const auto& s = shape();
    if (s.size() != 2) throw ShapeError("at(i,j): tensor is not 2-d");
    if (i < 0 || i >= s[0] || j < 0 || j >= s[1]) throw IndexError("at(i,j): index out of range");
    return impl_->data[static_cast<std::size_t>(i * s[1] + j)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
    if (!impl_) throw StateError("tensor is undefined");
    impl_->requires_grad = value;
    return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const& {
    if (!impl_) throw StateError("tensor is undefined");
    if (impl_->grad.empty()) throw StateError("tensor has no gradient");
    return impl_->grad;
}

std::span<double> Tensor::mutable_grad() & {
    if (!impl_) throw StateError("tensor is undefined");
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    if (!impl_) throw StateError("tensor is undefined");
    return Tensor(make_impl(impl_->shape, impl_->data));
}

// ---- record machinery ----

void ComputationRecord::record(Node node) {
    outputs_.push_back(node.output.get());
    nodes_.push_back(std::move(node));
    consumed_ = false;
}

bool ComputationRecord::contains(const detail::TensorImpl* impl) const {
    // Linear scan is fine for membership probes from user code; backward
    // builds its own hash set.
    return std::find(outputs_.begin(), outputs_.end(), impl) != outputs_.end();
}

RecordScope::RecordScope(ComputationRecord& record) : previous_(g_active_record) {
    g_active_record = &record;
}

RecordScope::~RecordScope() { g_active_record = previous_; }

NoRecordScope::NoRecordScope() : previous_(g_active_record) { g_active_record = nullptr; }

NoRecordScope::~NoRecordScope() { g_active_record = previous_; }

ComputationRecord* active_record() { return g_active_record; }

namespace {

Tensor emit(OpKind kind, Shape out_shape, std::vector<double> out_data,
            std::initializer_list<Tensor> inputs, std::vector<std::int64_t> iargs = {},
            std::vector<double> dargs = {}) {
    Tensor out = Tensor::from_data(std::move(out_shape), std::move(out_data));
    if (g_active_record != nullptr) {
        ComputationRecord::Node node;
        node.kind = kind;
        node.inputs.reserve(inputs.size());
        for (const auto& t : inputs) node.inputs.push_back(t.impl_ptr());
        node.output = out.impl_ptr();
        node.iargs = std::move(iargs);
        node.dargs = std::move(dargs);
        g_active_record->record(std::move(node));
    }
    return out;
}

Tensor emit(OpKind kind, Shape out_shape, std::vector<double> out_data,
            std::span<const Tensor> inputs, std::vector<std::int64_t> iargs = {},
            std::vector<double> dargs = {}) {
    Tensor out = Tensor::from_data(std::move(out_shape), std::move(out_data));
    if (g_active_record != nullptr) {
        ComputationRecord::Node node;
        node.kind = kind;
        node.inputs.reserve(inputs.size());
        for (const auto& t : inputs) node.inputs.push_back(t.impl_ptr());
        node.output = out.impl_ptr();
        node.iargs = std::move(iargs);
        node.dargs = std::move(dargs);
        g_active_record->record(std::move(node));
    }
    return out;
}

}  // namespace

// ---- ops ----

namespace {

Tensor matmul_impl(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    check(a.ndim() == 2 && b.ndim() == 2, "matmul", "operands must be matrices, got " +
                                                        shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::int64_t m = ta ? a.dim(1) : a.dim(0);
    const std::int64_t ka = ta ? a.dim(0) : a.dim(1);
    const std::int64_t kb = tb ? b.dim(1) : b.dim(0);
    const std::int64_t n = tb ? b.dim(0) : b.dim(1);
    if (ka != kb)
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + (ta ? "^T" : "") +
                         " vs " + shape_str(b.shape()) + (tb ? "^T" : ""));
    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    gemm_acc(ta, tb, m, n, ka, a.data().data(), b.data().data(), out.data());
    return emit(OpKind::MatMul, Shape{m, n}, std::move(out), {a, b},
                {ta ? std::int64_t{1} : std::int64_t{0}, tb ? std::int64_t{1} : std::int64_t{0}});
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false, false); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false, true); }
Tensor matmul_tn(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, true, false); }

Tensor add(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "add",
          "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    return emit(OpKind::Add, a.shape(), std::move(out), {a, b});
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    check(bias.ndim() == 1, "add_bias", "bias must be 1-d, got " + shape_str(bias.shape()));
    const std::int64_t d = bias.dim(0);
    check(!x.shape().empty() && x.shape().back() == d, "add_bias",
          "trailing axis of " + shape_str(x.shape()) + " must equal bias length " + std::to_string(d));
    std::vector<double> out(x.data().begin(), x.data().end());
    const auto bd = bias.data();
    const std::size_t rows = out.size() / static_cast<std::size_t>(d);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < static_cast<std::size_t>(d); ++j) out[r * d + j] += bd[j];
    return emit(OpKind::AddBias, x.shape(), std::move(out), {x, bias});
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "mul",
          "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
    return emit(OpKind::Mul, a.shape(), std::move(out), {a, b});
}

Tensor smul(const Tensor& x, const Tensor& scalar) {
    check(scalar.numel() == 1, "smul", "second operand must be scalar");
    const double s = scalar.data()[0];
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= s;
    return emit(OpKind::SMul, x.shape(), std::move(out), {x, scalar});
}

Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= c;
    return emit(OpKind::Scale, x.shape(), std::move(out), {x}, {}, {c});
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    return emit(OpKind::Relu, x.shape(), std::move(out), {x});
}

Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) {
        const double u = kGeluCoef * (v + kGeluCubic * v * v * v);
        v = 0.5 * v * (1.0 + std::tanh(u));
    }
    return emit(OpKind::Gelu, x.shape(), std::move(out), {x});
}

Tensor softmax(const Tensor& x, std::int64_t axis) {
    for (const double v : x.data())
        if (!std::isfinite(v)) throw ValueError("softmax: input contains NaN or inf");
    const auto s = split_axis(x.shape(), axis);
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t in = 0; in < s.inner; ++in) {
            double* base = out.data() + o * s.n * s.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t i = 0; i < s.n; ++i) mx = std::max(mx, base[i * s.inner]);
            double total = 0.0;
            for (std::int64_t i = 0; i < s.n; ++i) {
                double& v = base[i * s.inner];
                v = std::exp(v - mx);
                total += v;
            }
            for (std::int64_t i = 0; i < s.n; ++i) base[i * s.inner] /= total;
        }
    }
    const std::int64_t norm_axis = axis < 0 ? axis + static_cast<std::int64_t>(x.ndim()) : axis;
    return emit(OpKind::Softmax, x.shape(), std::move(out), {x}, {norm_axis});
}

Tensor log_(const Tensor& x) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = std::log(v);
    return emit(OpKind::Log, x.shape(), std::move(out), {x});
}

Tensor slice_last(const Tensor& x, std::int64_t start, std::int64_t len) {
    const auto& sh = x.shape();
    check(!sh.empty(), "slice_last", "tensor must have at least one axis");
    const std::int64_t d = sh.back();
    if (start < 0 || len <= 0 || start + len > d)
        throw ShapeError("slice_last: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of axis extent " + std::to_string(d));
    const std::int64_t outer = x.numel() / d;
    std::vector<double> out(static_cast<std::size_t>(outer * len));
    const auto xd = x.data();
    for (std::int64_t r = 0; r < outer; ++r)
        std::copy_n(xd.data() + r * d + start, len, out.data() + r * len);
    Shape out_shape = sh;
    out_shape.back() = len;
    return emit(OpKind::SliceLast, std::move(out_shape), std::move(out), {x}, {start, len});
}

Tensor concat_last(std::span<const Tensor> parts) {
    check(!parts.empty(), "concat_last", "no parts given");
    Shape lead = parts[0].shape();
    lead.pop_back();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        Shape pl = p.shape();
        check(!pl.empty(), "concat_last", "part must have at least one axis");
        const std::int64_t last = pl.back();
        pl.pop_back();
        check(pl == lead, "concat_last", "leading shapes differ");
        total += last;
    }
    std::int64_t outer = 1;
    for (const auto d : lead) outer *= d;
    std::vector<double> out(static_cast<std::size_t>(outer * total));
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t d = p.shape().back();
        const auto pd = p.data();
        for (std::int64_t r = 0; r < outer; ++r)
            std::copy_n(pd.data() + r * d, d, out.data() + r * total + off);
        off += d;
    }
    Shape out_shape = lead;
    out_shape.push_back(total);
    return emit(OpKind::ConcatLast, std::move(out_shape), std::move(out), parts);
}

Tensor gather_cols(const Tensor& x, std::span<const std::int64_t> cols, std::int64_t k) {
    check(x.ndim() == 2, "gather_cols", "input must be 2-d, got " + shape_str(x.shape()));
    const std::int64_t n = x.dim(0), v = x.dim(1);
    if (k <= 0 || static_cast<std::int64_t>(cols.size()) != n * k)
        throw ShapeError("gather_cols: need " + std::to_string(n) + "*k indices");
    std::vector<double> out(static_cast<std::size_t>(n * k));
    const auto xd = x.data();
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < k; ++j) {
            const std::int64_t c = cols[static_cast<std::size_t>(i * k + j)];
            if (c < 0 || c >= v) throw IndexError("gather_cols: column " + std::to_string(c) +
                                                  " out of range [0, " + std::to_string(v) + ")");
            out[static_cast<std::size_t>(i * k + j)] = xd[static_cast<std::size_t>(i * v + c)];
        }
    }
    std::vector<std::int64_t> iargs(cols.begin(), cols.end());
    iargs.push_back(k);
    return emit(OpKind::GatherCols, Shape{n, k}, std::move(out), {x}, std::move(iargs));
}

Tensor take_rows(const Tensor& x, std::span<const std::int64_t> rows) {
    check(x.ndim() == 2, "take_rows", "input must be 2-d, got " + shape_str(x.shape()));
    const std::int64_t n = x.dim(0), d = x.dim(1);
    std::vector<double> out(rows.size() * static_cast<std::size_t>(d));
    const auto xd = x.data();
    for (std::size_t j = 0; j < rows.size(); ++j) {
        const std::int64_t r = rows[j];
        if (r < 0 || r >= n)
            throw IndexError("take_rows: row " + std::to_string(r) + " out of range [0, " +
                             std::to_string(n) + ")");
        std::copy_n(xd.data() + r * d, d, out.data() + static_cast<std::int64_t>(j) * d);
    }
    return emit(OpKind::TakeRows, Shape{static_cast<std::int64_t>(rows.size()), d}, std::move(out),
                {x}, std::vector<std::int64_t>(rows.begin(), rows.end()));
}

Tensor scatter_rows(const Tensor& x, std::span<const std::int64_t> rows, std::int64_t n_rows) {
    check(x.ndim() == 2, "scatter_rows", "input must be 2-d");
    const std::int64_t m = x.dim(0), d = x.dim(1);
    if (static_cast<std::int64_t>(rows.size()) != m)
        throw ShapeError("scatter_rows: need one destination row per input row");
    std::vector<double> out(static_cast<std::size_t>(n_rows * d), 0.0);
    const auto xd = x.data();
    for (std::int64_t j = 0; j < m; ++j) {
        const std::int64_t r = rows[static_cast<std::size_t>(j)];
        if (r < 0 || r >= n_rows) throw IndexError("scatter_rows: destination row out of range");
        for (std::int64_t c = 0; c < d; ++c) out[static_cast<std::size_t>(r * d + c)] += xd[static_cast<std::size_t>(j * d + c)];
    }
    std::vector<std::int64_t> iargs{n_rows};
    iargs.insert(iargs.end(), rows.begin(), rows.end());
    return emit(OpKind::ScatterRows, Shape{n_rows, d}, std::move(out), {x}, std::move(iargs));
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    check(x.ndim() == 2, "scale_rows", "expects x[N,d]");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    check(s.numel() == n, "scale_rows", "need one scale per row");
    std::vector<double> out(x.data().begin(), x.data().end());
    const auto sd = s.data();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::size_t>(i * d + j)] *= sd[static_cast<std::size_t>(i)];
    return emit(OpKind::ScaleRows, x.shape(), std::move(out), {x, s});
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (const double v : x.data()) acc += v;
    return emit(OpKind::Sum, Shape{1}, {acc}, {x});
}

Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (const double v : x.data()) acc += v;
    return emit(OpKind::Mean, Shape{1}, {acc / static_cast<double>(x.numel())}, {x});
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> ids) {
    return take_rows(table, ids);
}

Tensor cross_entropy_per_row(const Tensor& logits, std::span<const std::int64_t> targets) {
    check(logits.ndim() == 2, "cross_entropy", "logits must be 2-d, got " + shape_str(logits.shape()));
    const std::int64_t b = logits.dim(0), v = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != b)
        throw ShapeError("cross_entropy: need one target per row");
    for (const auto t : targets)
        if (t < 0 || t >= v)
            throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range [0, " +
                             std::to_string(v) + ")");
    Tensor probs = softmax(logits, 1);
    Tensor logp = log_(probs);
    Tensor picked = gather_cols(logp, targets, 1);
    return scale(picked, -1.0);
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets) {
    return mean(cross_entropy_per_row(logits, targets));
}

// ---- backward ----

void ComputationRecord::backward_from(const Tensor& loss) {
    if (loss.numel() != 1) throw ValueError("backward: loss must be a scalar tensor");

    std::unordered_set<const detail::TensorImpl*> outputs(outputs_.begin(), outputs_.end());
    if (!outputs.contains(loss.impl()))
        throw StateError("backward: loss was not produced under this computation record");

    std::unordered_map<const detail::TensorImpl*, std::vector<double>> grads;
    grads[loss.impl()] = {1.0};

    auto route_grad = [&](const std::shared_ptr<detail::TensorImpl>& input, std::vector<double>&& g) {
        if (!outputs.contains(input.get())) {
            if (input->requires_grad) {
                if (input->grad.empty()) input->grad.assign(input->data.size(), 0.0);
                for (std::size_t i = 0; i < g.size(); ++i) input->grad[i] += g[i];
            }
            return;
        }
        auto it = grads.find(input.get());
        if (it == grads.end()) {
            grads.emplace(input.get(), std::move(g));
        } else {
            auto& acc = it->second;
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        }
    };

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        const Node& node = *it;
        auto git = grads.find(node.output.get());
        if (git == grads.end()) continue;  // did not contribute to the loss
        const std::vector<double> dy = std::move(git->second);
        grads.erase(git);

        const auto& out_data = node.output->data;
        switch (node.kind) {
            case OpKind::MatMul: {
                const bool ta = node.iargs[0] != 0, tb = node.iargs[1] != 0;
                const auto& a = node.inputs[0];
                const auto& b = node.inputs[1];
                const std::int64_t m = ta ? a->shape[1] : a->shape[0];
                const std::int64_t k = ta ? a->shape[0] : a->shape[1];
                const std::int64_t n = tb ? b->shape[0] : b->shape[1];
                // dA_eff = dY * B_eff^T ; dB_eff = A_eff^T * dY, undone per flag.
                std::vector<double> da(a->data.size(), 0.0);
                std::vector<double> db(b->data.size(), 0.0);
                if (!ta) {
                    // da[m,k] = dY[m,n] * B_eff[k,n]^T
                    gemm_acc(false, !tb, m, k, n, dy.data(), b->data.data(), da.data());
                } else {
                    // a stored [k,m]; da = B_eff[k,n] * dY^T -> use (B_eff, dY^T)
                    // compute da[k,m] = B_eff[k,n] * dY[m,n]^T
                    gemm_acc(tb, true, k, m, n, b->data.data(), dy.data(), da.data());
                }
                if (!tb) {
                    // db[k,n] = A_eff[m,k]^T * dY[m,n]
                    gemm_acc(!ta, false, k, n, m, a->data.data(), dy.data(), db.data());
                } else {
                    // b stored [n,k]; db[n,k] = dY[m,n]^T * A_eff[m,k]
                    gemm_acc(true, ta, n, k, m, dy.data(), a->data.data(), db.data());
                }
                route_grad(node.inputs[0], std::move(da));
                route_grad(node.inputs[1], std::move(db));
                break;
            }
            case OpKind::Add: {
                std::vector<double> g1 = dy;
                route_grad(node.inputs[0], std::move(g1));
                route_grad(node.inputs[1], std::vector<double>(dy));
                break;
            }
            case OpKind::AddBias: {
                const std::int64_t d = static_cast<std::int64_t>(node.inputs[1]->data.size());
                std::vector<double> db(static_cast<std::size_t>(d), 0.0);
                const std::int64_t rows = static_cast<std::int64_t>(dy.size()) / d;
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < d; ++j) db[static_cast<std::size_t>(j)] += dy[static_cast<std::size_t>(r * d + j)];
                route_grad(node.inputs[0], std::vector<double>(dy));
                route_grad(node.inputs[1], std::move(db));
                break;
            }
            case OpKind::Mul: {
                const auto& a = node.inputs[0]->data;
                const auto& b = node.inputs[1]->data;
                std::vector<double> da(dy.size()), db(dy.size());
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    da[i] = dy[i] * b[i];
                    db[i] = dy[i] * a[i];
                }
                route_grad(node.inputs[0], std::move(da));
                route_grad(node.inputs[1], std::move(db));
                break;
            }
            case OpKind::SMul: {
                const auto& x = node.inputs[0]->data;
                const double s = node.inputs[1]->data[0];
                std::vector<double> dx(dy.size());
                double ds = 0.0;
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    dx[i] = dy[i] * s;
                    ds += dy[i] * x[i];
                }
                route_grad(node.inputs[0], std::move(dx));
                route_grad(node.inputs[1], {ds});
                break;
            }
            case OpKind::Scale: {
                const double c = node.dargs[0];
                std::vector<double> dx(dy.size());
                for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * c;
                route_grad(node.inputs[0], std::move(dx));
                break;
            }
            case OpKind::Relu: {
                const auto& x = node.inputs[0]->data;
                std::vector<double> dx(dy.size());
                for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
                route_grad(node.inputs[0], std::move(dx));
                break;
            }
            case OpKind::Gelu: {
                const auto& x = node.inputs[0]->data;
                std::vector<double> dx(dy.size());
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    const double v = x[i];
                    const double u = kGeluCoef * (v + kGeluCubic * v * v * v);
                    const double th = std::tanh(u);
                    const double sech2 = 1.0 - th * th;
                    const double du = kGeluCoef * (1.0 + 3.0 * kGeluCubic * v * v);
                    dx[i] = dy[i] * (0.5 * (1.0 + th) + 0.5 * v * sech2 * du);
                }
                route_grad(node.inputs[0], std::move(dx));
                break;
            }
            case OpKind::Softmax: {
                const auto s = split_axis(node.output->shape, node.iargs[0]);
                std::vector<double> dx(dy.size());
                for (std::int64_t o = 0; o < s.outer; ++o) {
                    for (std::int64_t in = 0; in < s.inner; ++in) {
                        const std::int64_t base = o * s.n * s.inner + in;
                        double dot = 0.0;
                        for (std::int64_t i = 0; i < s.n; ++i) {
                            const std::size_t idx = static_cast<std::size_t>(base + i * s.inner);
                            dot += dy[idx] * out_data[idx];
                        }
                        for (std::int64_t i = 0; i < s.n; ++i) {
                            const std::size_t idx = static_cast<std::size_t>(base + i * s.inner);
                            dx[idx] = out_data[idx] * (dy[idx] - dot);
                        }
                    }
                }
                route_grad(node.inputs[0], std::move(dx));
                break;
            }
            case OpKind::Log: {
                const auto& x = node.inputs[0]->data;
                std::vector<double> dx(dy.size());
                // dy == 0 contributes nothing even where x == 0; keeps
                // unselected log-prob entries from poisoning the sweep.
                for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] == 0.0 ? 0.0 : dy[i] / x[i];
                route_grad(node.inputs[0], std::move(dx));
                break;
            }
            case OpKind::SliceLast: {
                const std::int64_t start = node.iargs[0], len = node.iargs[1];
                const std::int64_t d = node.inputs[0]->shape.back();
                const std::int64_t outer = static_cast<std::int64_t>(node.inputs[0]->data.size()) / d;
                std::vector<double> dx(node.inputs[0]->data.size(), 0.0);
                for (std::int64_t r = 0; r < outer; ++r)
                    for (std::int64_t j = 0; j < len; ++j)
                        dx[static_cast<std::size_t>(r * d + start + j)] = dy[static_cast<std::size_t>(r * len + j)];
                route_grad(node.inputs[0], std::move(dx));
                break;
            }
            case OpKind::ConcatLast: {
                const std::int64_t total = node.output->shape.back();
                const std::int64_t outer = static_cast<std::int64_t>(out_data.size()) / total;
                std::int64_t off = 0;
                for (const auto& input : node.inputs) {
                    const std::int64_t d = input->shape.back();
                    std::vector<double> dx(input->data.size());
                    for (std::int64_t r = 0; r < outer; ++r)
                        std::copy_n(dy.data() + r * total + off, d, dx.data() + r * d);
                    off += d;
                    route_grad(input, std::move(dx));
                }
                break;
            }
            case OpKind::GatherCols: {
                const std::int64_t k = node.iargs.back();
                const std::int64_t n = node.inputs[0]->shape[0];
                const std::int64_t v = node.inputs[0]->shape[1];
                std::vector<double> dx(node.inputs[0]->data.size(), 0.0);
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t j = 0; j < k; ++j)
                        dx[static_cast<std::size_t>(i * v + node.iargs[static_cast<std::size_t>(i * k + j)])] +=
                            dy[static_cast<std::size_t>(i * k + j)];
                route_grad(node.inputs[0], std::move(dx));
                break;
            }
            case OpKind::TakeRows: {
                const std::int64_t d = node.inputs[0]->shape[1];
                std::vector<double> dx(node.inputs[0]->data.size(), 0.0);
                for (std::size_t j = 0; j < node.iargs.size(); ++j) {
                    const std::int64_t r = node.iargs[j];
                    for (std::int64_t c = 0; c < d; ++c)
                        dx[static_cast<std::size_t>(r * d + c)] += dy[j * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)];
                }
                route_grad(node.inputs[0], std::move(dx));
                break;
            }
            case OpKind::ScatterRows: {
                const std::int64_t d = node.inputs[0]->shape[1];
                const std::int64_t m = node.inputs[0]->shape[0];
                std::vector<double> dx(node.inputs[0]->data.size());
                for (std::int64_t j = 0; j < m; ++j) {
                    const std::int64_t r = node.iargs[static_cast<std::size_t>(j + 1)];
                    for (std::int64_t c = 0; c < d; ++c)
                        dx[static_cast<std::size_t>(j * d + c)] = dy[static_cast<std::size_t>(r * d + c)];
                }
                route_grad(node.inputs[0], std::move(dx));
                break;
            }
            case OpKind::ScaleRows: {
                const auto& x = node.inputs[0]->data;
                const auto& s = node.inputs[1]->data;
                const std::int64_t n = node.inputs[0]->shape[0];
                const std::int64_t d = node.inputs[0]->shape[1];
                std::vector<double> dx(x.size());
                std::vector<double> ds(s.size(), 0.0);
                for (std::int64_t i = 0; i < n; ++i) {
                    for (std::int64_t j = 0; j < d; ++j) {
                        const std::size_t idx = static_cast<std::size_t>(i * d + j);
                        dx[idx] = dy[idx] * s[static_cast<std::size_t>(i)];
                        ds[static_cast<std::size_t>(i)] += dy[idx] * x[idx];
                    }
                }
                route_grad(node.inputs[0], std::move(dx));
                route_grad(node.inputs[1], std::move(ds));
                break;
            }
            case OpKind::Sum: {
                route_grad(node.inputs[0], std::vector<double>(node.inputs[0]->data.size(), dy[0]));
                break;
            }
            case OpKind::Mean: {
                const double g = dy[0] / static_cast<double>(node.inputs[0]->data.size());
                route_grad(node.inputs[0], std::vector<double>(node.inputs[0]->data.size(), g));
                break;
            }
        }
    }

    nodes_.clear();
    outputs_.clear();
    consumed_ = true;
}

void backward(const Tensor& loss) {
    ComputationRecord* rec = active_record();
    if (rec == nullptr) throw StateError("backward: no active computation record");
    rec->backward_from(loss);
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double step) {
    if (step <= 0.0) throw ValueError("finite_diff_grad: step must be positive");
    // Evaluate f outside any active record so probes are not recorded.
    ComputationRecord* saved = g_active_record;
    g_active_record = nullptr;
    Tensor probe = x.detach();
    auto d = probe.mutable_data();
    std::vector<double> grad(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double orig = d[i];
        d[i] = orig + step;
        const double fp = f(probe);
        d[i] = orig - step;
        const double fm = f(probe);
        d[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    g_active_record = saved;
    return Tensor::from_data(x.shape(), std::move(grad));
}

double max_rel_err(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("max_rel_err: size mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-3});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

}  // namespace mfl
