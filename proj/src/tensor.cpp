#include "kinediff/tensor.h"

#include "kinediff/errors.h"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace kinediff {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using detail::Node;
using NodePtr = std::shared_ptr<Node>;

thread_local bool g_grad_enabled = true;

#if defined(__GLIBC__)
// Activation buffers of a few MB are allocated and freed every step. Keeping
// them on the heap instead of fresh mmap pages avoids a page-fault storm.
const bool g_heap_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
  return true;
}();
#endif

void check_finite(const Buffer& values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

// Builds the output node and wires it into the tape when any input needs a
// gradient. `backward` receives the finished node.
Tensor make_result(
    Shape shape,
    Buffer values,
    std::vector<NodePtr> parents,
    std::function<void(Node&)> backward,
    const char* op) {
  check_finite(values, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  bool needs_grad = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      needs_grad = needs_grad || p->requires_grad;
    }
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Dimension bookkeeping for ops that act on one axis: the tensor is viewed as
// [outer, dim, inner].
struct AxisView {
  std::size_t outer = 1;
  std::size_t dim = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) {
    v.outer *= shape[i];
  }
  v.dim = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) {
    v.inner *= shape[i];
  }
  return v;
}

// Index mapping for a broadcasting binary op.
class BroadcastPlan {
 public:
  BroadcastPlan(const Shape& a, const Shape& b) : out_(broadcast_shapes(a, b)) {
    n_ = shape_numel(out_);
    na_ = shape_numel(a);
    nb_ = shape_numel(b);
    if (a == out_ && b == out_) {
      kind_ = Kind::Same;
    } else if (nb_ == 1 && a == out_) {
      kind_ = Kind::BScalar;
    } else if (na_ == 1 && b == out_) {
      kind_ = Kind::AScalar;
    } else if (a == out_ && is_suffix(b, out_)) {
      kind_ = Kind::BSuffix;
    } else if (b == out_ && is_suffix(a, out_)) {
      kind_ = Kind::ASuffix;
    } else {
      kind_ = Kind::General;
      build_general(a, b);
    }
  }

  const Shape& out_shape() const {
    return out_;
  }
  std::size_t size() const {
    return n_;
  }

  // f(out_index, a_index, b_index)
  template <class F>
  void visit(F&& f) const {
    switch (kind_) {
      case Kind::Same:
        for (std::size_t i = 0; i < n_; ++i) {
          f(i, i, i);
        }
        break;
      case Kind::BScalar:
        for (std::size_t i = 0; i < n_; ++i) {
          f(i, i, std::size_t{0});
        }
        break;
      case Kind::AScalar:
        for (std::size_t i = 0; i < n_; ++i) {
          f(i, std::size_t{0}, i);
        }
        break;
      case Kind::BSuffix:
        for (std::size_t i = 0; i < n_; i += nb_) {
          for (std::size_t j = 0; j < nb_; ++j) {
            f(i + j, i + j, j);
          }
        }
        break;
      case Kind::ASuffix:
        for (std::size_t i = 0; i < n_; i += na_) {
          for (std::size_t j = 0; j < na_; ++j) {
            f(i + j, j, i + j);
          }
        }
        break;
      case Kind::General:
        for (std::size_t i = 0; i < n_; ++i) {
          f(i, ia_[i], ib_[i]);
        }
        break;
    }
  }

 private:
  enum class Kind { Same, BScalar, AScalar, BSuffix, ASuffix, General };

  static bool is_suffix(const Shape& s, const Shape& full) {
    if (s.size() > full.size()) {
      return false;
    }
    return std::equal(s.begin(), s.end(), full.end() - static_cast<std::ptrdiff_t>(s.size()));
  }

  void build_general(const Shape& a, const Shape& b) {
    const std::size_t rank = out_.size();
    auto strides_for = [&](const Shape& s) {
      std::vector<std::size_t> st(rank, 0);
      std::size_t stride = 1;
      for (std::size_t k = 0; k < s.size(); ++k) {
        const std::size_t axis = s.size() - 1 - k;
        const std::size_t out_axis = rank - 1 - k;
        st[out_axis] = (s[axis] == 1) ? 0 : stride;
        stride *= s[axis];
      }
      return st;
    };
    const auto sa = strides_for(a);
    const auto sb = strides_for(b);
    ia_.resize(n_);
    ib_.resize(n_);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0;
    std::size_t ob = 0;
    for (std::size_t i = 0; i < n_; ++i) {
      ia_[i] = oa;
      ib_[i] = ob;
      for (std::size_t k = rank; k-- > 0;) {
        ++idx[k];
        oa += sa[k];
        ob += sb[k];
        if (idx[k] < out_[k]) {
          break;
        }
        oa -= sa[k] * idx[k];
        ob -= sb[k] * idx[k];
        idx[k] = 0;
      }
    }
  }

  Shape out_;
  std::size_t n_ = 0;
  std::size_t na_ = 0;
  std::size_t nb_ = 0;
  Kind kind_ = Kind::Same;
  std::vector<std::size_t> ia_;
  std::vector<std::size_t> ib_;
};

// fwd(a, b) -> out; da(a, b, out) and db(a, b, out) are the partials.
template <class Fwd, class Da, class Db>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Da da, Db db) {
  auto plan = std::make_shared<BroadcastPlan>(a.shape(), b.shape());
  const auto& av = a.node()->values;
  const auto& bv = b.node()->values;
  Buffer out(plan->size());
  plan->visit([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  return make_result(
      plan->out_shape(),
      std::move(out),
      {a.node(), b.node()},
      [plan, da, db](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const auto& g = self.grad;
        if (pa.requires_grad) {
          auto& ga = pa.ensure_grad();
          plan->visit([&](std::size_t i, std::size_t ia, std::size_t ib) {
            ga[ia] += g[i] * da(pa.values[ia], pb.values[ib], self.values[i]);
          });
        }
        if (pb.requires_grad) {
          auto& gb = pb.ensure_grad();
          plan->visit([&](std::size_t i, std::size_t ia, std::size_t ib) {
            gb[ib] += g[i] * db(pa.values[ia], pb.values[ib], self.values[i]);
          });
        }
      },
      op);
}

// fwd(x) -> y; dfdx(x, y).
template <class Fwd, class Dx>
Tensor unary_op(const Tensor& x, const char* op, Fwd fwd, Dx dfdx) {
  const auto& xv = x.node()->values;
  Buffer out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = fwd(xv[i]);
  }
  return make_result(
      x.shape(),
      std::move(out),
      {x.node()},
      [dfdx](Node& self) {
        Node& px = *self.parents[0];
        auto& gx = px.ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) {
          gx[i] += self.grad[i] * dfdx(px.values[i], self.values[i]);
        }
      },
      op);
}

} // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << ']';
  return os.str();
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_to_string(a) + " with " + shape_to_string(b));
    }
    out[rank - 1 - k] = std::max(da, db);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : Tensor(Shape{}, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<Node>()) {
  node_->values.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<Node>()) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError(
        "shape " + shape_to_string(shape) + " does not match " + std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->values.assign(values.begin(), values.end());
}

Tensor::Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

Tensor Tensor::scalar(double value) {
  return Tensor(Shape{}, std::vector<double>{value});
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

const Shape& Tensor::shape() const {
  return node_->shape;
}
std::size_t Tensor::rank() const {
  return node_->shape.size();
}
std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(shape()));
  }
  return node_->shape[axis];
}
std::size_t Tensor::numel() const {
  return node_->values.size();
}

std::span<const double> Tensor::values() const {
  return node_->values;
}

std::span<double> Tensor::mutable_values() {
  return node_->values;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() requires a single-element tensor, got " + shape_to_string(shape()));
  }
  return node_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) {
    throw DimensionError("index rank mismatch for shape " + shape_to_string(shape()));
  }
  std::size_t offset = 0;
  std::size_t k = 0;
  for (std::size_t i : index) {
    if (i >= node_->shape[k]) {
      throw DimensionError("index out of range for shape " + shape_to_string(shape()));
    }
    offset = offset * node_->shape[k] + i;
    ++k;
  }
  return node_->values[offset];
}

bool Tensor::requires_grad() const {
  return node_->requires_grad;
}

void Tensor::set_requires_grad(bool on) {
  if (!node_->is_leaf()) {
    throw ContractError("requires_grad can only be set on leaf tensors");
  }
  node_->requires_grad = on;
}

bool Tensor::has_grad() const {
  return node_->grad.size() == node_->values.size() && !node_->values.empty();
}

std::vector<double> Tensor::grad() const {
  if (!has_grad()) {
    return std::vector<double>(numel(), 0.0);
  }
  return std::vector<double>(node_->grad.begin(), node_->grad.end());
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor(shape(), std::vector<double>(node_->values.begin(), node_->values.end()));
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_to_string(shape()));
  }
  if (!node_->requires_grad) {
    return;
  }
  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (!n->is_leaf()) {
      n->grad.assign(n->values.size(), 0.0);
    }
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) {
      (*it)->backward(**it);
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
  g_grad_enabled = previous_;
}

bool grad_enabled() {
  return g_grad_enabled;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor operator+(const Tensor& a, const Tensor& b) {
  return binary_op(
      a,
      b,
      "add",
      [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  return binary_op(
      a,
      b,
      "sub",
      [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor operator*(const Tensor& a, const Tensor& b) {
  return binary_op(
      a,
      b,
      "mul",
      [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor operator/(const Tensor& a, const Tensor& b) {
  return binary_op(
      a,
      b,
      "div",
      [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor operator-(const Tensor& a) {
  return unary_op(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor operator+(const Tensor& a, double b) {
  return unary_op(a, "add_scalar", [b](double x) { return x + b; }, [](double, double) { return 1.0; });
}

Tensor operator*(const Tensor& a, double b) {
  return unary_op(a, "mul_scalar", [b](double x) { return x * b; }, [b](double, double) { return b; });
}

Tensor operator*(double a, const Tensor& b) {
  return b * a;
}

Tensor square(const Tensor& x) {
  return unary_op(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.values()) {
    if (v < 0.0) {
      throw NumericError("sqrt of a negative value");
    }
  }
  return unary_op(
      x, "sqrt", [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor exp(const Tensor& x) {
  return unary_op(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary_op(
      x,
      "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace {

// Plain loops beat the blocked GEMM path for the many tiny per-head products
// in attention.
constexpr std::size_t kSmallGemm = 48 * 48 * 48;

// c[m,p] = a[m,k] b[k,p]
void small_gemm_ab(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * p;
    std::fill(ci, ci + p, 0.0);
    for (std::size_t q = 0; q < k; ++q) {
      const double aiq = a[i * k + q];
      const double* bq = b + q * p;
      for (std::size_t r = 0; r < p; ++r) {
        ci[r] += aiq * bq[r];
      }
    }
  }
}

// c[m,k] += g[m,p] b[k,p]^T
void small_gemm_abt_acc(const double* g, const double* b, double* c, std::size_t m, std::size_t p, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * p;
    for (std::size_t q = 0; q < k; ++q) {
      const double* bq = b + q * p;
      double acc = 0.0;
      for (std::size_t r = 0; r < p; ++r) {
        acc += gi[r] * bq[r];
      }
      c[i * k + q] += acc;
    }
  }
}

// c[k,p] += a[m,k]^T g[m,p]
void small_gemm_atb_acc(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * p;
    for (std::size_t q = 0; q < k; ++q) {
      const double aiq = a[i * k + q];
      double* cq = c + q * p;
      for (std::size_t r = 0; r < p; ++r) {
        cq[r] += aiq * gi[r];
      }
    }
  }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands");
  }
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];
  const std::size_t kb = sb[sb.size() - 2];
  const std::size_t p = sb[sb.size() - 1];
  if (k != kb) {
    throw DimensionError("matmul inner dimensions differ: " + shape_to_string(sa) + " x " + shape_to_string(sb));
  }
  const auto eig = [](std::size_t n) { return static_cast<Eigen::Index>(n); };

  if (sb.size() == 2) {
    // Shared right operand: one GEMM over all leading rows of a.
    const std::size_t rows = a.numel() / k;
    Shape out_shape(sa.begin(), sa.end() - 1);
    out_shape.push_back(p);
    Buffer out(rows * p);
    MutMap(out.data(), eig(rows), eig(p)).noalias() =
        ConstMap(a.values().data(), eig(rows), eig(k)) * ConstMap(b.values().data(), eig(k), eig(p));
    return make_result(
        std::move(out_shape),
        std::move(out),
        {a.node(), b.node()},
        [rows, k, p, eig](Node& self) {
          Node& na = *self.parents[0];
          Node& nb = *self.parents[1];
          ConstMap g(self.grad.data(), eig(rows), eig(p));
          if (na.requires_grad) {
            MutMap(na.ensure_grad().data(), eig(rows), eig(k)).noalias() +=
                g * ConstMap(nb.values.data(), eig(k), eig(p)).transpose();
          }
          if (nb.requires_grad) {
            MutMap(nb.ensure_grad().data(), eig(k), eig(p)).noalias() +=
                ConstMap(na.values.data(), eig(rows), eig(k)).transpose() * g;
          }
        },
        "matmul");
  }

  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  const auto plan = std::make_shared<BroadcastPlan>(batch_a, batch_b);
  Shape out_shape = plan->out_shape();
  out_shape.push_back(m);
  out_shape.push_back(p);
  Buffer out(plan->size() * m * p);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  const bool small = m * k * p <= kSmallGemm;
  plan->visit([&](std::size_t i, std::size_t ia, std::size_t ib) {
    if (small) {
      small_gemm_ab(av + ia * m * k, bv + ib * k * p, out.data() + i * m * p, m, k, p);
      return;
    }
    MutMap(out.data() + i * m * p, eig(m), eig(p)).noalias() =
        ConstMap(av + ia * m * k, eig(m), eig(k)) * ConstMap(bv + ib * k * p, eig(k), eig(p));
  });
  return make_result(
      std::move(out_shape),
      std::move(out),
      {a.node(), b.node()},
      [plan, m, k, p, eig](Node& self) {
        Node& na = *self.parents[0];
        Node& nb = *self.parents[1];
        double* ga = na.requires_grad ? na.ensure_grad().data() : nullptr;
        double* gb = nb.requires_grad ? nb.ensure_grad().data() : nullptr;
        const bool small = m * k * p <= kSmallGemm;
        plan->visit([&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (small) {
            const double* g = self.grad.data() + i * m * p;
            if (ga) {
              small_gemm_abt_acc(g, nb.values.data() + ib * k * p, ga + ia * m * k, m, p, k);
            }
            if (gb) {
              small_gemm_atb_acc(na.values.data() + ia * m * k, g, gb + ib * k * p, m, k, p);
            }
            return;
          }
          ConstMap g(self.grad.data() + i * m * p, eig(m), eig(p));
          if (ga) {
            MutMap(ga + ia * m * k, eig(m), eig(k)).noalias() +=
                g * ConstMap(nb.values.data() + ib * k * p, eig(k), eig(p)).transpose();
          }
          if (gb) {
            MutMap(gb + ib * k * p, eig(k), eig(p)).noalias() +=
                ConstMap(na.values.data() + ia * m * k, eig(m), eig(k)).transpose() * g;
          }
        });
      },
      "matmul");
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weight.dim(1)) {
    throw DimensionError(
        "linear expects weight [in,out] and bias [out], got " + shape_to_string(weight.shape()) + " and " +
        shape_to_string(bias.shape()));
  }
  const std::size_t in = weight.dim(0);
  const std::size_t outc = weight.dim(1);
  if (x.rank() < 1 || x.shape().back() != in) {
    throw DimensionError("linear input " + shape_to_string(x.shape()) + " does not end in " + std::to_string(in));
  }
  const auto eig = [](std::size_t n) { return static_cast<Eigen::Index>(n); };
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outc;
  Buffer out(rows * outc);
  MutMap y(out.data(), eig(rows), eig(outc));
  y.noalias() = ConstMap(x.values().data(), eig(rows), eig(in)) * ConstMap(weight.values().data(), eig(in), eig(outc));
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), eig(outc));
  return make_result(
      std::move(out_shape),
      std::move(out),
      {x.node(), weight.node(), bias.node()},
      [rows, in, outc, eig](Node& self) {
        Node& nx = *self.parents[0];
        Node& nw = *self.parents[1];
        Node& nb = *self.parents[2];
        ConstMap g(self.grad.data(), eig(rows), eig(outc));
        if (nx.requires_grad) {
          MutMap(nx.ensure_grad().data(), eig(rows), eig(in)).noalias() +=
              g * ConstMap(nw.values.data(), eig(in), eig(outc)).transpose();
        }
        if (nw.requires_grad) {
          MutMap(nw.ensure_grad().data(), eig(in), eig(outc)).noalias() +=
              ConstMap(nx.values.data(), eig(rows), eig(in)).transpose() * g;
        }
        if (nb.requires_grad) {
          Eigen::Map<Eigen::RowVectorXd>(nb.ensure_grad().data(), eig(outc)) += g.colwise().sum();
        }
      },
      "linear");
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_to_string(x.shape()) + " to " + shape_to_string(shape));
  }
  return make_result(
      std::move(shape),
      x.node()->values,
      {x.node()},
      [](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) {
          gx[i] += self.grad[i];
        }
      },
      "reshape");
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  const std::size_t rank = in.size();
  if (axes.size() != rank) {
    throw DimensionError("permute axes do not match rank of " + shape_to_string(in));
  }
  std::vector<bool> seen(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank || seen[a]) {
      throw DimensionError("permute axes are not a permutation");
    }
    seen[a] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t k = rank; k-- > 1;) {
    in_strides[k - 1] = in_strides[k] * in[k];
  }
  Shape out_shape(rank);
  std::vector<std::size_t> step(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    out_shape[k] = in[axes[k]];
    step[k] = in_strides[axes[k]];
  }
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*src)[i] = offset;
    for (std::size_t k = rank; k-- > 0;) {
      ++idx[k];
      offset += step[k];
      if (idx[k] < out_shape[k]) {
        break;
      }
      offset -= step[k] * idx[k];
      idx[k] = 0;
    }
  }
  const auto& xv = x.node()->values;
  Buffer out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = xv[(*src)[i]];
  }
  return make_result(
      std::move(out_shape),
      std::move(out),
      {x.node()},
      [src](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < src->size(); ++i) {
          gx[(*src)[i]] += self.grad[i];
        }
      },
      "permute");
}

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  if (axis0 >= axes.size() || axis1 >= axes.size()) {
    throw DimensionError("transpose axis out of range for " + shape_to_string(x.shape()));
  }
  std::swap(axes[axis0], axes[axis1]);
  return permute(x, axes);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) {
    throw ContractError("concat of zero tensors");
  }
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw DimensionError("concat axis out of range for " + shape_to_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) {
      throw DimensionError("concat rank mismatch");
    }
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (k != axis && s[k] != first[k]) {
        throw DimensionError("concat shape mismatch: " + shape_to_string(first) + " vs " + shape_to_string(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  const AxisView ov = axis_view(out_shape, axis);
  Buffer out(shape_numel(out_shape));
  auto widths = std::make_shared<std::vector<std::size_t>>();
  std::size_t col = 0;
  std::vector<std::size_t> starts;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * ov.inner;
    widths->push_back(w);
    starts.push_back(col);
    const auto& pv = p.node()->values;
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy_n(pv.data() + o * w, w, out.data() + o * ov.dim * ov.inner + col);
    }
    col += w;
  }
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
  }
  const std::size_t row = ov.dim * ov.inner;
  const std::size_t outer = ov.outer;
  return make_result(
      std::move(out_shape),
      std::move(out),
      std::move(nodes),
      [widths, starts, row, outer](Node& self) {
        for (std::size_t j = 0; j < self.parents.size(); ++j) {
          Node& pj = *self.parents[j];
          if (!pj.requires_grad) {
            continue;
          }
          auto& g = pj.ensure_grad();
          const std::size_t w = (*widths)[j];
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = self.grad.data() + o * row + starts[j];
            double* dst = g.data() + o * w;
            for (std::size_t i = 0; i < w; ++i) {
              dst[i] += src[i];
            }
          }
        }
      },
      "concat");
}

Tensor gather(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& indices) {
  const AxisView v = axis_view(x.shape(), axis);
  for (std::size_t i : indices) {
    if (i >= v.dim) {
      throw DimensionError("gather index " + std::to_string(i) + " out of range for axis size " + std::to_string(v.dim));
    }
  }
  Shape out_shape = x.shape();
  out_shape[axis] = indices.size();
  const std::size_t k = indices.size();
  Buffer out(v.outer * k * v.inner);
  const auto& xv = x.node()->values;
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t j = 0; j < k; ++j) {
      std::copy_n(
          xv.data() + (o * v.dim + indices[j]) * v.inner, v.inner, out.data() + (o * k + j) * v.inner);
    }
  }
  return make_result(
      std::move(out_shape),
      std::move(out),
      {x.node()},
      [v, indices](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        const std::size_t k = indices.size();
        for (std::size_t o = 0; o < v.outer; ++o) {
          for (std::size_t j = 0; j < k; ++j) {
            const double* src = self.grad.data() + (o * k + j) * v.inner;
            double* dst = gx.data() + (o * v.dim + indices[j]) * v.inner;
            for (std::size_t i = 0; i < v.inner; ++i) {
              dst[i] += src[i];
            }
          }
        }
      },
      "gather");
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) {
    total += v;
  }
  return make_result(
      Shape{},
      {total},
      {x.node()},
      [](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        const double g = self.grad[0];
        for (double& v : gx) {
          v += g;
        }
      },
      "sum");
}

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  const AxisView v = axis_view(x.shape(), axis);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  Buffer out(v.outer * v.inner, 0.0);
  const auto& xv = x.node()->values;
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t d = 0; d < v.dim; ++d) {
      const double* src = xv.data() + (o * v.dim + d) * v.inner;
      double* dst = out.data() + o * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) {
        dst[i] += src[i];
      }
    }
  }
  return make_result(
      std::move(out_shape),
      std::move(out),
      {x.node()},
      [v](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (std::size_t o = 0; o < v.outer; ++o) {
          for (std::size_t d = 0; d < v.dim; ++d) {
            const double* src = self.grad.data() + o * v.inner;
            double* dst = gx.data() + (o * v.dim + d) * v.inner;
            for (std::size_t i = 0; i < v.inner; ++i) {
              dst[i] += src[i];
            }
          }
        }
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) {
    throw ContractError("mean of an empty tensor");
  }
  return sum(x) * (1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
  const std::size_t d = x.dim(axis);
  if (d == 0) {
    throw ContractError("mean over an empty axis");
  }
  return sum(x, axis, keepdim) * (1.0 / static_cast<double>(d));
}

// ---------------------------------------------------------------------------
// Normalization

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis);
  const auto& xv = x.node()->values;
  Buffer out(xv.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.dim * v.inner + i;
      double mx = xv[base];
      for (std::size_t d = 1; d < v.dim; ++d) {
        mx = std::max(mx, xv[base + d * v.inner]);
      }
      double total = 0.0;
      for (std::size_t d = 0; d < v.dim; ++d) {
        const double e = std::exp(xv[base + d * v.inner] - mx);
        out[base + d * v.inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::size_t d = 0; d < v.dim; ++d) {
        out[base + d * v.inner] *= inv;
      }
    }
  }
  return make_result(
      x.shape(),
      std::move(out),
      {x.node()},
      [v](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        const auto& y = self.values;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < v.outer; ++o) {
          for (std::size_t i = 0; i < v.inner; ++i) {
            const std::size_t base = o * v.dim * v.inner + i;
            double dot = 0.0;
            for (std::size_t d = 0; d < v.dim; ++d) {
              dot += g[base + d * v.inner] * y[base + d * v.inner];
            }
            for (std::size_t d = 0; d < v.dim; ++d) {
              const std::size_t at = base + d * v.inner;
              gx[at] += y[at] * (g[at] - dot);
            }
          }
        }
      },
      "softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) {
    throw DimensionError("layer_norm needs rank >= 1");
  }
  const std::size_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("layer_norm gamma/beta must have shape [" + std::to_string(c) + "]");
  }
  const std::size_t rows = x.numel() / c;
  const auto& xv = x.node()->values;
  const auto& gv = gamma.node()->values;
  const auto& bv = beta.node()->values;
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Buffer out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      mu += row[i];
    }
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      var += (row[i] - mu) * (row[i] - mu);
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t i = 0; i < c; ++i) {
      const double h = (row[i] - mu) * inv;
      (*xhat)[r * c + i] = h;
      out[r * c + i] = h * gv[i] + bv[i];
    }
  }
  return make_result(
      x.shape(),
      std::move(out),
      {x.node(), gamma.node(), beta.node()},
      [xhat, inv_std, rows, c](Node& self) {
        Node& nx = *self.parents[0];
        Node& ng = *self.parents[1];
        Node& nb = *self.parents[2];
        const auto& g = self.grad;
        if (ng.requires_grad) {
          auto& gg = ng.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < c; ++i) {
              gg[i] += g[r * c + i] * (*xhat)[r * c + i];
            }
          }
        }
        if (nb.requires_grad) {
          auto& gb = nb.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < c; ++i) {
              gb[i] += g[r * c + i];
            }
          }
        }
        if (nx.requires_grad) {
          auto& gx = nx.ensure_grad();
          const auto& gamma_v = ng.values;
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0;
            double mean_dh = 0.0;
            for (std::size_t i = 0; i < c; ++i) {
              const double d = g[r * c + i] * gamma_v[i];
              mean_d += d;
              mean_dh += d * (*xhat)[r * c + i];
            }
            mean_d *= inv_c;
            mean_dh *= inv_c;
            for (std::size_t i = 0; i < c; ++i) {
              const double d = g[r * c + i] * gamma_v[i];
              gx[r * c + i] += (*inv_std)[r] * (d - mean_d - (*xhat)[r * c + i] * mean_dh);
            }
          }
        }
      },
      "layer_norm");
}

Tensor norm_last(const Tensor& x) {
  if (x.rank() < 1) {
    throw DimensionError("norm_last needs rank >= 1");
  }
  const std::size_t c = x.shape().back();
  const std::size_t rows = c == 0 ? 0 : x.numel() / c;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  const auto& xv = x.node()->values;
  Buffer out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      s += xv[r * c + i] * xv[r * c + i];
    }
    out[r] = std::sqrt(s);
  }
  return make_result(
      std::move(out_shape),
      std::move(out),
      {x.node()},
      [rows, c](Node& self) {
        Node& nx = *self.parents[0];
        auto& gx = nx.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const double n = self.values[r];
          if (n == 0.0) {
            continue;
          }
          const double scale = self.grad[r] / n;
          for (std::size_t i = 0; i < c; ++i) {
            gx[r * c + i] += scale * nx.values[r * c + i];
          }
        }
      },
      "norm");
}

} // namespace kinediff
