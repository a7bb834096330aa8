// SPDX-License-Identifier: Apache-2.0
#include "fanformer/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fanformer {

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local FlopsMeter* g_active_meter = nullptr;
thread_local FlopCategory g_flop_category = FlopCategory::other;
std::atomic<std::uint64_t> g_tape_counter{1};

std::size_t shape_product(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

bool tracked(const Tensor& t) {
  Tape* tape = Tape::active();
  if (!tape) return false;
  return t.requires_grad() || (t.node >= 0 && t.tape_id == tape->id());
}

bool recording(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs)
    if (tracked(*t)) return true;
  return false;
}
}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(std::move(values))),
      requires_grad_(requires_grad) {
  if (shape_product(shape_) != data_->size())
    throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_->size()) + " values");
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::size_t n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1}, {value}); }

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
  std::size_t n = values.size();
  return Tensor({1, n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(const std::vector<std::vector<double>>& rows, bool requires_grad) {
  std::size_t m = rows.size();
  std::size_t n = m ? rows[0].size() : 0;
  std::vector<double> flat;
  flat.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw ShapeError("matrix: ragged rows");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(flat), requires_grad);
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (shape_.size() != 2) throw ShapeError("rows: tensor is not 2-d, shape " + shape_str(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() != 2) throw ShapeError("cols: tensor is not 2-d, shape " + shape_str(shape_));
  return shape_[1];
}

double Tensor::item() const {
  if (size() != 1) throw UsageError("item: tensor has " + std::to_string(size()) + " elements");
  return (*data_)[0];
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {
  previous_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

int Tape::node_of(const Tensor& t) {
  if (t.node >= 0 && t.tape_id == id_) return t.node;
  auto it = leaves_.find(t.id());
  if (it != leaves_.end()) return it->second;
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{{}, nullptr, t.shape()});
  grads_.emplace_back();
  leaves_.emplace(t.id(), id);
  return id;
}

int Tape::emit(Tensor& out, std::vector<int> parents,
               std::function<void(Tape&, int)> backward) {
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{std::move(parents), std::move(backward), out.shape()});
  grads_.emplace_back();
  out.node = id;
  out.tape_id = id_;
  return id;
}

Tensor& Tape::grad_buffer(int node_id, const Shape& shape) {
  Tensor& g = grads_[node_id];
  if (!g.defined()) g = Tensor::zeros(shape);
  return g;
}

void Tape::backward(const Tensor& root) {
  if (root.size() != 1)
    throw UsageError("backward: root must be scalar, got shape " + shape_str(root.shape()));
  if (root.node < 0 || root.tape_id != id_)
    throw UsageError("backward: root was not produced on this tape");
  grad_buffer(root.node, root.shape()).data()[0] = 1.0;
  for (int i = root.node; i >= 0; --i) {
    if (!nodes_[i].backward || !grads_[i].defined()) continue;
    nodes_[i].backward(*this, i);
  }
}

Tensor Tape::grad(const Tensor& t) const {
  int id = -1;
  if (t.node >= 0 && t.tape_id == id_) {
    id = t.node;
  } else {
    auto it = leaves_.find(t.id());
    if (it == leaves_.end())
      throw UsageError("grad: tensor does not participate in this tape");
    id = it->second;
  }
  if (!grads_[id].defined()) return Tensor::zeros(t.shape());
  return grads_[id];
}

bool Tape::has_grad(const Tensor& t) const {
  auto it = leaves_.find(t.id());
  if (it != leaves_.end()) return grads_[it->second].defined();
  if (t.node >= 0 && t.tape_id == id_) return grads_[t.node].defined();
  return false;
}

// ---- FLOPs meter -----------------------------------------------------------

FlopsMeter::FlopsMeter() {
  previous_ = g_active_meter;
  g_active_meter = this;
}
FlopsMeter::~FlopsMeter() { g_active_meter = previous_; }
FlopsMeter* FlopsMeter::active() { return g_active_meter; }
void FlopsMeter::add(FlopCategory cat, long long flops) {
  totals_[static_cast<int>(cat)] += flops;
}
long long FlopsMeter::grand_total() const {
  return totals_[0] + totals_[1] + totals_[2] + totals_[3];
}

FlopScope::FlopScope(FlopCategory cat) : previous_(g_flop_category) {
  g_flop_category = cat;
}
FlopScope::~FlopScope() { g_flop_category = previous_; }
FlopCategory FlopScope::current() { return g_flop_category; }

// ---- helpers ---------------------------------------------------------------

double sigmoid_scalar(double x) {
  if (x >= 0) {
    double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  double z = std::exp(x);
  return z / (1.0 + z);
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

namespace {

// C[m x p] += or = A[m x n] * B[n x p], plain ikj kernel.
void matmul_into(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t n, std::size_t p, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * p, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = b + k * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
}

std::vector<double> transpose_values(const Tensor& t) {
  std::size_t m = t.rows(), n = t.cols();
  std::vector<double> out(m * n);
  const auto& v = t.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  return out;
}

}  // namespace

// ---- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    shape_fail("matmul", a.shape(), b.shape());
  std::size_t m = a.rows(), n = a.cols(), p = b.cols();
  if (FlopsMeter* meter = FlopsMeter::active())
    meter->add(FlopScope::current(), 2LL * m * n * p);

  std::vector<double> out(m * p);
  matmul_into(a.data().data(), b.data().data(), out.data(), m, n, p, false);
  Tensor c({m, p}, std::move(out));

  if (recording({&a, &b})) {
    Tape& tape = *Tape::active();
    int ia = tracked(a) ? tape.node_of(a) : -1;
    int ib = tracked(b) ? tape.node_of(b) : -1;
    Tensor av = a, bv = b;
    std::vector<int> parents;
    if (ia >= 0) parents.push_back(ia);
    if (ib >= 0) parents.push_back(ib);
    tape.emit(c, parents, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      if (ia >= 0) {
        // dA = dC * B^T
        Tensor& gacc = t.grad_buffer(ia, av.shape());
        std::vector<double> bt = transpose_values(bv);
        matmul_into(gout.data().data(), bt.data(), gacc.data().data(), m, p, n, true);
      }
      if (ib >= 0) {
        // dB = A^T * dC
        Tensor& gacc = t.grad_buffer(ib, bv.shape());
        std::vector<double> at = transpose_values(av);
        matmul_into(at.data(), gout.data().data(), gacc.data().data(), n, m, p, true);
      }
    });
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  std::size_t m = a.rows(), n = a.cols();
  Tensor c({n, m}, transpose_values(a));
  if (recording({&a})) {
    Tape& tape = *Tape::active();
    int ia = tape.node_of(a);
    Shape ashape = a.shape();
    tape.emit(c, {ia}, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      Tensor& gacc = t.grad_buffer(ia, ashape);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
          gacc.data()[j * n + i] += gout.data()[i * m + j];
    });
  }
  return c;
}

namespace {
Tensor binary_pointwise(const char* name, const Tensor& a, const Tensor& b,
                        double (*fwd)(double, double), double da, double db) {
  // da, db: constant partials (only +/-/ need them); mul handled separately.
  if (!same_shape(a, b)) shape_fail(name, a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i], b.data()[i]);
  Tensor c(a.shape(), std::move(out));
  if (recording({&a, &b})) {
    Tape& tape = *Tape::active();
    int ia = tracked(a) ? tape.node_of(a) : -1;
    int ib = tracked(b) ? tape.node_of(b) : -1;
    Shape shape = a.shape();
    std::vector<int> parents;
    if (ia >= 0) parents.push_back(ia);
    if (ib >= 0) parents.push_back(ib);
    tape.emit(c, parents, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      if (ia >= 0) {
        Tensor& gaacc = t.grad_buffer(ia, shape);
        for (std::size_t i = 0; i < gout.size(); ++i) gaacc.data()[i] += da * gout.data()[i];
      }
      if (ib >= 0) {
        Tensor& gbacc = t.grad_buffer(ib, shape);
        for (std::size_t i = 0; i < gout.size(); ++i) gbacc.data()[i] += db * gout.data()[i];
      }
    });
  }
  return c;
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_pointwise("add", a, b, [](double x, double y) { return x + y; }, 1.0, 1.0);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_pointwise("sub", a, b, [](double x, double y) { return x - y; }, 1.0, -1.0);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) shape_fail("mul", a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tensor c(a.shape(), std::move(out));
  if (recording({&a, &b})) {
    Tape& tape = *Tape::active();
    int ia = tracked(a) ? tape.node_of(a) : -1;
    int ib = tracked(b) ? tape.node_of(b) : -1;
    Tensor av = a, bv = b;
    std::vector<int> parents;
    if (ia >= 0) parents.push_back(ia);
    if (ib >= 0) parents.push_back(ib);
    tape.emit(c, parents, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      if (ia >= 0) {
        Tensor& gaacc = t.grad_buffer(ia, av.shape());
        for (std::size_t i = 0; i < gout.size(); ++i)
          gaacc.data()[i] += bv.data()[i] * gout.data()[i];
      }
      if (ib >= 0) {
        Tensor& gbacc = t.grad_buffer(ib, bv.shape());
        for (std::size_t i = 0; i < gout.size(); ++i)
          gbacc.data()[i] += av.data()[i] * gout.data()[i];
      }
    });
  }
  return c;
}

Tensor add_bias_row(const Tensor& x, const Tensor& bias) {
  if (bias.shape().size() != 2 || bias.rows() != 1 || bias.cols() != x.cols())
    shape_fail("add_bias_row", x.shape(), bias.shape());
  std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] + bias.data()[j];
  Tensor c({m, n}, std::move(out));
  if (recording({&x, &bias})) {
    Tape& tape = *Tape::active();
    int ix = tracked(x) ? tape.node_of(x) : -1;
    int ib = tracked(bias) ? tape.node_of(bias) : -1;
    std::vector<int> parents;
    if (ix >= 0) parents.push_back(ix);
    if (ib >= 0) parents.push_back(ib);
    tape.emit(c, parents, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double g = gout.data()[i * n + j];
          if (ix >= 0) t.grad_buffer(ix, {m, n}).data()[i * n + j] += g;
          if (ib >= 0) t.grad_buffer(ib, {1, n}).data()[j] += g;
        }
    });
  }
  return c;
}

Tensor mul_bias_row(const Tensor& x, const Tensor& gain) {
  if (gain.shape().size() != 2 || gain.rows() != 1 || gain.cols() != x.cols())
    shape_fail("mul_bias_row", x.shape(), gain.shape());
  std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] * gain.data()[j];
  Tensor c({m, n}, std::move(out));
  if (recording({&x, &gain})) {
    Tape& tape = *Tape::active();
    int ix = tracked(x) ? tape.node_of(x) : -1;
    int ig = tracked(gain) ? tape.node_of(gain) : -1;
    Tensor xv = x, gv = gain;
    std::vector<int> parents;
    if (ix >= 0) parents.push_back(ix);
    if (ig >= 0) parents.push_back(ig);
    tape.emit(c, parents, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double g = gout.data()[i * n + j];
          if (ix >= 0) t.grad_buffer(ix, {m, n}).data()[i * n + j] += g * gv.data()[j];
          if (ig >= 0) t.grad_buffer(ig, {1, n}).data()[j] += g * xv.data()[i * n + j];
        }
    });
  }
  return c;
}

Tensor row_scale(const Tensor& x, const Tensor& r) {
  if (r.shape().size() != 2 || r.cols() != 1 || r.rows() != x.rows())
    shape_fail("row_scale", x.shape(), r.shape());
  std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] * r.data()[i];
  Tensor c({m, n}, std::move(out));
  if (recording({&x, &r})) {
    Tape& tape = *Tape::active();
    int ix = tracked(x) ? tape.node_of(x) : -1;
    int ir = tracked(r) ? tape.node_of(r) : -1;
    Tensor xv = x, rv = r;
    std::vector<int> parents;
    if (ix >= 0) parents.push_back(ix);
    if (ir >= 0) parents.push_back(ir);
    tape.emit(c, parents, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double g = gout.data()[i * n + j];
          if (ix >= 0) t.grad_buffer(ix, {m, n}).data()[i * n + j] += g * rv.data()[i];
          acc += g * xv.data()[i * n + j];
        }
        if (ir >= 0) t.grad_buffer(ir, {m, 1}).data()[i] += acc;
      }
    });
  }
  return c;
}

Tensor scale(const Tensor& x, double cval) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * cval;
  Tensor c(x.shape(), std::move(out));
  if (recording({&x})) {
    Tape& tape = *Tape::active();
    int ix = tape.node_of(x);
    Shape shape = x.shape();
    tape.emit(c, {ix}, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      Tensor& gx = t.grad_buffer(ix, shape);
      for (std::size_t i = 0; i < gout.size(); ++i) gx.data()[i] += cval * gout.data()[i];
    });
  }
  return c;
}

Tensor add_scalar(const Tensor& x, double cval) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + cval;
  Tensor c(x.shape(), std::move(out));
  if (recording({&x})) {
    Tape& tape = *Tape::active();
    int ix = tape.node_of(x);
    Shape shape = x.shape();
    tape.emit(c, {ix}, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      Tensor& gx = t.grad_buffer(ix, shape);
      for (std::size_t i = 0; i < gout.size(); ++i) gx.data()[i] += gout.data()[i];
    });
  }
  return c;
}

Tensor unary(UnaryKind kind, const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& v = x.data();
  switch (kind) {
    case UnaryKind::cos:
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::cos(v[i]);
      break;
    case UnaryKind::sin:
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::sin(v[i]);
      break;
    case UnaryKind::exp:
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::exp(v[i]);
      break;
    case UnaryKind::swish:
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * sigmoid_scalar(v[i]);
      break;
    case UnaryKind::neg:
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = -v[i];
      break;
    case UnaryKind::reciprocal:
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] == 0.0) throw NumericError("reciprocal: division by exact zero");
        out[i] = 1.0 / v[i];
      }
      break;
    case UnaryKind::sqrt:
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::sqrt(v[i]);
      break;
    case UnaryKind::gelu:
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = gelu_scalar(v[i]);
      break;
    case UnaryKind::sigmoid:
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = sigmoid_scalar(v[i]);
      break;
  }
  Tensor c(x.shape(), std::move(out));
  if (recording({&x})) {
    Tape& tape = *Tape::active();
    int ix = tape.node_of(x);
    Tensor xv = x;
    tape.emit(c, {ix}, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      Tensor& gx = t.grad_buffer(ix, xv.shape());
      const auto& in = xv.data();
      for (std::size_t i = 0; i < in.size(); ++i) {
        double d = 0.0;
        switch (kind) {
          case UnaryKind::cos: d = -std::sin(in[i]); break;
          case UnaryKind::sin: d = std::cos(in[i]); break;
          case UnaryKind::exp: d = std::exp(in[i]); break;
          case UnaryKind::swish: {
            double s = sigmoid_scalar(in[i]);
            d = s * (1.0 + in[i] * (1.0 - s));
            break;
          }
          case UnaryKind::neg: d = -1.0; break;
          case UnaryKind::reciprocal: d = -1.0 / (in[i] * in[i]); break;
          case UnaryKind::sqrt: d = 0.5 / std::sqrt(in[i]); break;
          case UnaryKind::gelu: {
            constexpr double inv_sqrt2pi = 0.3989422804014327;
            double phi = inv_sqrt2pi * std::exp(-0.5 * in[i] * in[i]);
            d = 0.5 * (1.0 + std::erf(in[i] / std::sqrt(2.0))) + in[i] * phi;
            break;
          }
          case UnaryKind::sigmoid: {
            double s = sigmoid_scalar(in[i]);
            d = s * (1.0 - s);
            break;
          }
        }
        gx.data()[i] += d * gout.data()[i];
      }
    });
  }
  return c;
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.shape().empty() || x.shape().back() < 1)
    throw ShapeError("softmax_lastdim: empty last dimension, shape " + shape_str(x.shape()));
  std::size_t n = x.shape().back();
  std::size_t rows = x.size() / n;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  Tensor c(x.shape(), std::move(out));
  if (recording({&x})) {
    Tape& tape = *Tape::active();
    int ix = tape.node_of(x);
    Tensor sv = c;
    Shape shape = x.shape();
    tape.emit(c, {ix}, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      Tensor& gx = t.grad_buffer(ix, shape);
      // dx = s * (g - <g, s>)
      for (std::size_t r = 0; r < rows; ++r) {
        const double* s = sv.data().data() + r * n;
        const double* g = gout.data().data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * s[j];
        double* acc = gx.data().data() + r * n;
        for (std::size_t j = 0; j < n; ++j) acc[j] += s[j] * (g[j] - dot);
      }
    });
  }
  return c;
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_lastdim: no parts");
  std::size_t m = parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != m) shape_fail("concat_lastdim", parts[0].shape(), p.shape());
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.data().data() + i * w, w, out.data() + i * total + off);
    off += w;
  }
  Tensor c({m, total}, std::move(out));

  bool rec = false;
  for (const Tensor& p : parts)
    if (tracked(p)) rec = true;
  if (rec) {
    Tape& tape = *Tape::active();
    std::vector<int> ids;
    std::vector<std::size_t> widths;
    std::vector<int> parents;
    for (const Tensor& p : parts) {
      int id = tracked(p) ? tape.node_of(p) : -1;
      ids.push_back(id);
      if (id >= 0) parents.push_back(id);
      widths.push_back(p.cols());
    }
    tape.emit(c, parents, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      std::size_t o = 0;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        std::size_t w = widths[k];
        if (ids[k] >= 0) {
          Tensor& gp = t.grad_buffer(ids[k], {m, w});
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
              gp.data()[i * w + j] += gout.data()[i * total + o + j];
        }
        o += w;
      }
    });
  }
  return c;
}

Tensor slice_lastdim(const Tensor& x, std::size_t start, std::size_t width) {
  std::size_t m = x.rows(), n = x.cols();
  if (start + width > n)
    throw ShapeError("slice_lastdim: [" + std::to_string(start) + "," +
                     std::to_string(start + width) + ") out of " + shape_str(x.shape()));
  std::vector<double> out(m * width);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data().data() + i * n + start, width, out.data() + i * width);
  Tensor c({m, width}, std::move(out));
  if (recording({&x})) {
    Tape& tape = *Tape::active();
    int ix = tape.node_of(x);
    tape.emit(c, {ix}, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      Tensor& gx = t.grad_buffer(ix, {m, n});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < width; ++j)
          gx.data()[i * n + start + j] += gout.data()[i * width + j];
    });
  }
  return c;
}

Tensor sum(const Tensor& x) {
  double s = std::accumulate(x.data().begin(), x.data().end(), 0.0);
  Tensor c = Tensor::scalar(s);
  if (recording({&x})) {
    Tape& tape = *Tape::active();
    int ix = tape.node_of(x);
    Shape shape = x.shape();
    tape.emit(c, {ix}, [=](Tape& t, int self) {
      double g = t.grad_at(self).data()[0];
      Tensor& gx = t.grad_buffer(ix, shape);
      for (double& v : gx.data()) v += g;
    });
  }
  return c;
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> tokens) {
  std::size_t v = table.rows(), d = table.cols();
  std::size_t l = tokens.size();
  std::vector<double> out(l * d);
  for (std::size_t i = 0; i < l; ++i) {
    int tok = tokens[i];
    if (tok < 0 || static_cast<std::size_t>(tok) >= v)
      throw UsageError("embedding_lookup: token " + std::to_string(tok) +
                       " out of vocabulary " + std::to_string(v));
    std::copy_n(table.data().data() + static_cast<std::size_t>(tok) * d, d,
                out.data() + i * d);
  }
  Tensor c({l, d}, std::move(out));
  if (recording({&table})) {
    Tape& tape = *Tape::active();
    int it = tape.node_of(table);
    std::vector<int> toks(tokens.begin(), tokens.end());
    tape.emit(c, {it}, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      Tensor& gt = t.grad_buffer(it, {v, d});
      for (std::size_t i = 0; i < toks.size(); ++i)
        for (std::size_t j = 0; j < d; ++j)
          gt.data()[static_cast<std::size_t>(toks[i]) * d + j] += gout.data()[i * d + j];
    });
  }
  return c;
}

Tensor gather_rows(const Tensor& x, std::span<const int> rows) {
  std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    int r = rows[i];
    if (r < 0 || static_cast<std::size_t>(r) >= m)
      throw UsageError("gather_rows: row " + std::to_string(r) + " out of " + std::to_string(m));
    std::copy_n(x.data().data() + static_cast<std::size_t>(r) * n, n, out.data() + i * n);
  }
  Tensor c({rows.size(), n}, std::move(out));
  if (recording({&x})) {
    Tape& tape = *Tape::active();
    int ix = tape.node_of(x);
    std::vector<int> idx(rows.begin(), rows.end());
    tape.emit(c, {ix}, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      Tensor& gx = t.grad_buffer(ix, {m, n});
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j)
          gx.data()[static_cast<std::size_t>(idx[i]) * n + j] += gout.data()[i * n + j];
    });
  }
  return c;
}

namespace {
// Pairwise rotation angles for position t: theta_i = t * base^(-2i/d).
void rope_rotate(const double* in, double* out, std::size_t l, std::size_t d,
                 double base, bool inverse) {
  for (std::size_t t = 0; t < l; ++t) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      double ang = static_cast<double>(t) * freq;
      if (inverse) ang = -ang;
      double c = std::cos(ang), s = std::sin(ang);
      double x0 = in[t * d + 2 * i], x1 = in[t * d + 2 * i + 1];
      out[t * d + 2 * i] = c * x0 - s * x1;
      out[t * d + 2 * i + 1] = s * x0 + c * x1;
    }
  }
}
}  // namespace

Tensor rope(const Tensor& x, double base) {
  std::size_t l = x.rows(), d = x.cols();
  if (d % 2 != 0)
    throw UsageError("rope: head dimension must be even, got " + std::to_string(d));
  std::vector<double> out(l * d);
  rope_rotate(x.data().data(), out.data(), l, d, base, false);
  Tensor c({l, d}, std::move(out));
  if (recording({&x})) {
    Tape& tape = *Tape::active();
    int ix = tape.node_of(x);
    tape.emit(c, {ix}, [=](Tape& t, int self) {
      const Tensor& gout = t.grad_at(self);
      Tensor& gx = t.grad_buffer(ix, {l, d});
      // transpose of a rotation is the inverse rotation
      std::vector<double> tmp(l * d);
      rope_rotate(gout.data().data(), tmp.data(), l, d, base, true);
      for (std::size_t i = 0; i < tmp.size(); ++i) gx.data()[i] += tmp[i];
    });
  }
  return c;
}

Tensor masked_cross_entropy(const Tensor& logits, std::span<const int> targets,
                            std::span<const std::uint8_t> mask) {
  std::size_t l = logits.rows(), v = logits.cols();
  if (targets.size() != l || mask.size() != l)
    throw UsageError("masked_cross_entropy: " + std::to_string(l) + " rows vs " +
                     std::to_string(targets.size()) + " targets, " +
                     std::to_string(mask.size()) + " mask entries");
  std::size_t count = 0;
  double loss = 0.0;
  std::vector<double> probs(l * v);
  for (std::size_t i = 0; i < l; ++i) {
    if (!mask[i]) continue;
    int tgt = targets[i];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= v)
      throw UsageError("masked_cross_entropy: target " + std::to_string(tgt) +
                       " out of vocabulary " + std::to_string(v));
    const double* row = logits.data().data() + i * v;
    double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    double logz = std::log(z) + mx;
    loss += logz - row[tgt];
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] = std::exp(row[j] - logz);
    ++count;
  }
  if (count == 0) throw UsageError("masked_cross_entropy: mask selects no positions");
  Tensor c = Tensor::scalar(loss / static_cast<double>(count));
  if (recording({&logits})) {
    Tape& tape = *Tape::active();
    int ix = tape.node_of(logits);
    std::vector<int> tgts(targets.begin(), targets.end());
    std::vector<std::uint8_t> msk(mask.begin(), mask.end());
    double inv = 1.0 / static_cast<double>(count);
    tape.emit(c, {ix}, [=, probs = std::move(probs)](Tape& t, int self) {
      double g = t.grad_at(self).data()[0];
      Tensor& gx = t.grad_buffer(ix, {l, v});
      for (std::size_t i = 0; i < l; ++i) {
        if (!msk[i]) continue;
        for (std::size_t j = 0; j < v; ++j) {
          double p = probs[i * v + j];
          double delta = (static_cast<std::size_t>(tgts[i]) == j) ? 1.0 : 0.0;
          gx.data()[i * v + j] += g * inv * (p - delta);
        }
      }
    });
  }
  return c;
}

}  // namespace fanformer
