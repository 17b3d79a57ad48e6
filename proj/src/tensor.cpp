#include "ct2rep/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace ct2rep {

namespace {

thread_local Tape* g_active_tape = nullptr;

using StoragePtr = std::shared_ptr<TensorStorage>;

// Returns the tape to record on, or nullptr when no input needs a gradient.
Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.dim() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

Tensor finish(Tensor out, Tape* tape, Tape::BackwardFn fn) {
  if (tape != nullptr) {
    out.set_requires_grad(true);
    tape->record(out, std::move(fn));
  }
  return out;
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : storage_(std::make_shared<TensorStorage>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor axes must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " elements");
  }
  storage_->shape = std::move(shape);
  storage_->data = std::move(data);
  storage_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data, bool requires_grad) {
  return Tensor({rows, cols}, std::move(data), requires_grad);
}

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= dim()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return shape()[axis];
}

std::size_t Tensor::rows() const {
  if (dim() == 2) return shape()[0];
  if (dim() <= 1) return 1;
  throw ShapeError("rows(): not a matrix " + shape_str(shape()));
}

std::size_t Tensor::cols() const {
  if (dim() == 2) return shape()[1];
  if (dim() == 1) return shape()[0];
  if (dim() == 0) return 1;
  throw ShapeError("cols(): not a matrix " + shape_str(shape()));
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return storage_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (r >= rows() || c >= cols()) throw ShapeError("index out of range");
  return storage_->data[r * cols() + c];
}

Tensor Tensor::clone() const { return Tensor(shape(), storage_->data, requires_grad()); }

// ---------------------------------------------------------------------------

void Tape::record(const Tensor& output, BackwardFn backward) {
  entries_.push_back(Entry{output.storage(), std::move(backward)});
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

std::vector<double>& grad_buffer(const StoragePtr& t) {
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  return t->grad;
}

void accumulate_grad(const StoragePtr& t, std::span<const double> delta) {
  if (!t->requires_grad) return;
  auto& g = grad_buffer(t);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

void backward(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("backward: loss is not connected to any parameter");
  auto& seed = grad_buffer(loss.storage());
  seed[0] += 1.0;
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not reachable from loss
    it->backward(it->output->grad);
  }
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  Tape* tape = recording_tape({&a, &b});
  StoragePtr sa = a.storage(), sb = b.storage();
  return finish(Tensor({m, n}, std::move(out)), tape, [sa, sb, m, k, n](const std::vector<double>& g) {
    if (sa->requires_grad) {
      auto& ga = grad_buffer(sa);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = sb->data.data() + p * n;
          const double* grow = g.data() + i * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (sb->requires_grad) {
      auto& gb = grad_buffer(sb);
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = sa->data[i * k + p];
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  Tape* tape = recording_tape({&a});
  StoragePtr sa = a.storage();
  return finish(Tensor({n, m}, std::move(out)), tape, [sa, m, n](const std::vector<double>& g) {
    auto& ga = grad_buffer(sa);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Tape* tape = recording_tape({&a, &b});
  StoragePtr sa = a.storage(), sb = b.storage();
  return finish(Tensor(a.shape(), std::move(out)), tape, [sa, sb](const std::vector<double>& g) {
    accumulate_grad(sa, g);
    accumulate_grad(sb, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  Tape* tape = recording_tape({&a, &b});
  StoragePtr sa = a.storage(), sb = b.storage();
  return finish(Tensor(a.shape(), std::move(out)), tape, [sa, sb](const std::vector<double>& g) {
    accumulate_grad(sa, g);
    if (sb->requires_grad) {
      auto& gb = grad_buffer(sb);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tape* tape = recording_tape({&a, &b});
  StoragePtr sa = a.storage(), sb = b.storage();
  return finish(Tensor(a.shape(), std::move(out)), tape, [sa, sb](const std::vector<double>& g) {
    if (sa->requires_grad) {
      auto& ga = grad_buffer(sa);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sb->data[i];
    }
    if (sb->requires_grad) {
      auto& gb = grad_buffer(sb);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * sa->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  Tape* tape = recording_tape({&a});
  StoragePtr sa = a.storage();
  return finish(Tensor(a.shape(), std::move(out)), tape, [sa, s](const std::vector<double>& g) {
    auto& ga = grad_buffer(sa);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Tensor add_rowwise(const Tensor& x, const Tensor& v) {
  require_matrix(x, "add_rowwise");
  const std::size_t m = x.rows(), n = x.cols();
  if (v.numel() != n) {
    throw ShapeError("add_rowwise: vector " + shape_str(v.shape()) + " does not match columns of " +
                     shape_str(x.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] + v.data()[j];
  Tape* tape = recording_tape({&x, &v});
  StoragePtr sx = x.storage(), sv = v.storage();
  return finish(Tensor({m, n}, std::move(out)), tape, [sx, sv, m, n](const std::vector<double>& g) {
    accumulate_grad(sx, g);
    if (sv->requires_grad) {
      auto& gv = grad_buffer(sv);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
    }
  });
}

Tensor mul_rowwise(const Tensor& x, const Tensor& v) {
  require_matrix(x, "mul_rowwise");
  const std::size_t m = x.rows(), n = x.cols();
  if (v.numel() != n) {
    throw ShapeError("mul_rowwise: vector " + shape_str(v.shape()) + " does not match columns of " +
                     shape_str(x.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] * v.data()[j];
  Tape* tape = recording_tape({&x, &v});
  StoragePtr sx = x.storage(), sv = v.storage();
  return finish(Tensor({m, n}, std::move(out)), tape, [sx, sv, m, n](const std::vector<double>& g) {
    if (sx->requires_grad) {
      auto& gx = grad_buffer(sx);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * sv->data[j];
    }
    if (sv->requires_grad) {
      auto& gv = grad_buffer(sv);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j] * sx->data[i * n + j];
    }
  });
}

namespace {

// Elementwise op whose derivative is expressed through input x and output y.
template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.data()[i]);
  Tape* tape = recording_tape({&x});
  Tensor result(x.shape(), std::move(out));
  StoragePtr sx = x.storage(), sy = result.storage();
  return finish(result, tape, [sx, sy, df](const std::vector<double>& g) {
    auto& gx = grad_buffer(sx);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(sx->data[i], sy->data[i]);
  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.dim()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(x.shape()));
  }
  const Shape& s = x.shape();
  const std::size_t len = s[axis];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t outer = x.numel() / (len * inner);
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, in[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(in[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
    }
  }
  Tape* tape = recording_tape({&x});
  Tensor result(s, std::move(out));
  StoragePtr sx = x.storage(), sy = result.storage();
  return finish(result, tape, [sx, sy, outer, inner, len](const std::vector<double>& g) {
    auto& gx = grad_buffer(sx);
    const auto& y = sy->data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t idx = base + k * inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor normalize_last(const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw ContractError("normalize: eps must be positive");
  if (x.dim() == 0) throw ShapeError("normalize: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  std::vector<double> inv_std(rows);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (row[j] - mu) * inv;
  }
  Tape* tape = recording_tape({&x});
  Tensor result(x.shape(), std::move(out));
  StoragePtr sx = x.storage(), sy = result.storage();
  return finish(result, tape, [sx, sy, n, rows, inv_std = std::move(inv_std)](const std::vector<double>& g) {
    auto& gx = grad_buffer(sx);
    const auto& y = sy->data;
    for (std::size_t r = 0; r < rows; ++r) {
      double mg = 0.0, mgy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        mg += g[r * n + j];
        mgy += g[r * n + j] * y[r * n + j];
      }
      mg /= static_cast<double>(n);
      mgy /= static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = r * n + j;
        gx[idx] += inv_std[r] * (g[idx] - mg - y[idx] * mgy);
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t n = x.dim() ? x.shape().back() : 0;
  if (gamma.numel() != n || beta.numel() != n) {
    throw ShapeError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                     " do not match last axis of " + shape_str(x.shape()));
  }
  Tensor normalized = normalize_last(x, eps);
  Tensor as_matrix = x.dim() == 2 ? normalized : reshape(normalized, {x.numel() / n, n});
  Tensor out = add_rowwise(mul_rowwise(as_matrix, gamma), beta);
  return x.dim() == 2 ? out : reshape(out, x.shape());
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tape* tape = recording_tape({&x});
  StoragePtr sx = x.storage();
  std::vector<double> data(x.data().begin(), x.data().end());
  return finish(Tensor(std::move(shape), std::move(data)), tape,
                [sx](const std::vector<double>& g) { accumulate_grad(sx, g); });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t total_rows = 0;
  for (const auto& p : parts) {
    if (p.dim() > 2 || p.cols() != n) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()));
    }
    total_rows += p.rows();
  }
  std::vector<double> out;
  out.reserve(total_rows * n);
  Tape* tape = Tape::active();
  bool any_grad = false;
  std::vector<StoragePtr> storages;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
    storages.push_back(p.storage());
    any_grad = any_grad || p.requires_grad();
  }
  if (!any_grad) tape = nullptr;
  return finish(Tensor({total_rows, n}, std::move(out)), tape,
                [storages = std::move(storages), offsets = std::move(offsets)](const std::vector<double>& g) {
                  for (std::size_t i = 0; i < storages.size(); ++i) {
                    const auto& s = storages[i];
                    if (!s->requires_grad) continue;
                    accumulate_grad(s, std::span<const double>(g.data() + offsets[i], s->data.size()));
                  }
                });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_rows");
  if (begin >= end || end > x.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t n = x.cols();
  std::vector<double> out(x.data().begin() + begin * n, x.data().begin() + end * n);
  Tape* tape = recording_tape({&x});
  StoragePtr sx = x.storage();
  return finish(Tensor({end - begin, n}, std::move(out)), tape, [sx, begin, n](const std::vector<double>& g) {
    auto& gx = grad_buffer(sx);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_matrix(table, "gather_rows");
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t n = table.cols();
  std::vector<double> out(ids.size() * n);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= table.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[r]) + " out of range for " +
                       shape_str(table.shape()));
    }
    std::copy_n(table.data().begin() + ids[r] * n, n, out.begin() + r * n);
  }
  Tape* tape = recording_tape({&table});
  StoragePtr st = table.storage();
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return finish(Tensor({ids.size(), n}, std::move(out)), tape,
                [st, n, idx = std::move(idx)](const std::vector<double>& g) {
                  auto& gt = grad_buffer(st);
                  for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t j = 0; j < n; ++j) gt[idx[r] * n + j] += g[r * n + j];
                });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tape* tape = recording_tape({&x});
  StoragePtr sx = x.storage();
  return finish(Tensor::scalar(total), tape, [sx](const std::vector<double>& g) {
    auto& gx = grad_buffer(sx);
    for (double& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

std::vector<double> log_softmax_row(std::span<const double> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  double total = 0.0;
  for (double v : logits) total += std::exp(v - mx);
  const double lse = mx + std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, std::size_t ignore_id) {
  require_matrix(logits, "cross_entropy");
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  std::vector<double> probs(rows * vocab, 0.0);
  std::size_t counted = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_id) continue;
    if (targets[r] >= vocab) throw ShapeError("cross_entropy: target id out of range");
    const auto lsm = log_softmax_row(logits.data().subspan(r * vocab, vocab));
    total -= lsm[targets[r]];
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] = std::exp(lsm[j]);
    ++counted;
  }
  const double denom = counted ? static_cast<double>(counted) : 1.0;
  Tape* tape = counted ? recording_tape({&logits}) : nullptr;
  StoragePtr sl = logits.storage();
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return finish(Tensor::scalar(total / denom), tape,
                [sl, vocab, denom, ignore_id, tgt = std::move(tgt), probs = std::move(probs)](
                    const std::vector<double>& g) {
                  auto& gl = grad_buffer(sl);
                  const double s = g[0] / denom;
                  for (std::size_t r = 0; r < tgt.size(); ++r) {
                    if (tgt[r] == ignore_id) continue;
                    for (std::size_t j = 0; j < vocab; ++j) {
                      const double onehot = j == tgt[r] ? 1.0 : 0.0;
                      gl[r * vocab + j] += s * (probs[r * vocab + j] - onehot);
                    }
                  }
                });
}

}  // namespace ct2rep
