#include "ct2rep/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace ct2rep {

SeqLayout SeqLayout::contiguous(std::size_t groups, std::size_t length) {
  SeqLayout layout;
  layout.length = length;
  layout.pos_stride = 1;
  layout.bases.resize(groups);
  for (std::size_t g = 0; g < groups; ++g) layout.bases[g] = g * length;
  return layout;
}

namespace {

struct Geometry {
  std::size_t groups, heads, head_dim, lq, lk, width;
  double scale;
  std::size_t visible(std::size_t p, bool causal) const {
    return causal ? std::min(lk, p + (lk - lq) + 1) : lk;
  }
};

Geometry check(const Tensor& q, const Tensor& k, const Tensor* v, const SeqLayout& ql, const SeqLayout& kl,
               const AttentionSpec& spec) {
  if (q.dim() != 2 || k.dim() != 2 || (v && v->dim() != 2)) throw ShapeError("attention: inputs must be matrices");
  const std::size_t width = q.cols();
  if (k.cols() != width || (v && v->cols() != width)) {
    throw ShapeError("attention: width mismatch q" + shape_str(q.shape()) + " k" + shape_str(k.shape()));
  }
  if (v && v->rows() != k.rows()) throw ShapeError("attention: key/value row mismatch");
  if (spec.heads == 0 || width % spec.heads != 0) {
    throw ShapeError("attention: width " + std::to_string(width) + " not divisible by " +
                     std::to_string(spec.heads) + " heads");
  }
  if (ql.groups() != kl.groups() || ql.groups() == 0) throw ShapeError("attention: group count mismatch");
  if (ql.length == 0 || kl.length == 0) throw ShapeError("attention: empty sequence");
  if (ql.groups() * ql.length != q.rows()) throw ShapeError("attention: query layout does not cover q");
  for (std::size_t g = 0; g < ql.groups(); ++g) {
    if (ql.row(g, ql.length - 1) >= q.rows() || kl.row(g, kl.length - 1) >= k.rows()) {
      throw ShapeError("attention: layout exceeds input rows");
    }
  }
  if (spec.causal && kl.length < ql.length) throw ShapeError("attention: causal needs keys >= queries");
  const std::size_t head_dim = width / spec.heads;
  return {ql.groups(), spec.heads, head_dim, ql.length, kl.length, width,
          1.0 / std::sqrt(static_cast<double>(head_dim))};
}

// Fills probs[(g*heads + h)*lq*lk + p*lk + j].
std::vector<double> compute_probs(const Tensor& q, const Tensor& k, const SeqLayout& ql, const SeqLayout& kl,
                                  const Geometry& geo, bool causal) {
  std::vector<double> probs(geo.groups * geo.heads * geo.lq * geo.lk, 0.0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  for (std::size_t g = 0; g < geo.groups; ++g) {
    for (std::size_t h = 0; h < geo.heads; ++h) {
      const std::size_t off = h * geo.head_dim;
      double* block = probs.data() + (g * geo.heads + h) * geo.lq * geo.lk;
      for (std::size_t p = 0; p < geo.lq; ++p) {
        const double* qrow = qd + ql.row(g, p) * geo.width + off;
        const std::size_t vis = geo.visible(p, causal);
        double* prow = block + p * geo.lk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < vis; ++j) {
          const double* krow = kd + kl.row(g, j) * geo.width + off;
          double s = 0.0;
          for (std::size_t d = 0; d < geo.head_dim; ++d) s += qrow[d] * krow[d];
          prow[j] = s * geo.scale;
          mx = std::max(mx, prow[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < vis; ++j) {
          prow[j] = std::exp(prow[j] - mx);
          total += prow[j];
        }
        for (std::size_t j = 0; j < vis; ++j) prow[j] /= total;
      }
    }
  }
  return probs;
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const SeqLayout& ql, const SeqLayout& kl,
                 AttentionSpec spec) {
  const Geometry geo = check(q, k, &v, ql, kl, spec);
  std::vector<double> probs = compute_probs(q, k, ql, kl, geo, spec.causal);
  std::vector<double> out(q.numel(), 0.0);
  const double* vd = v.data().data();
  for (std::size_t g = 0; g < geo.groups; ++g) {
    for (std::size_t h = 0; h < geo.heads; ++h) {
      const std::size_t off = h * geo.head_dim;
      const double* block = probs.data() + (g * geo.heads + h) * geo.lq * geo.lk;
      for (std::size_t p = 0; p < geo.lq; ++p) {
        double* orow = out.data() + ql.row(g, p) * geo.width + off;
        const std::size_t vis = geo.visible(p, spec.causal);
        for (std::size_t j = 0; j < vis; ++j) {
          const double w = block[p * geo.lk + j];
          const double* vrow = vd + kl.row(g, j) * geo.width + off;
          for (std::size_t d = 0; d < geo.head_dim; ++d) orow[d] += w * vrow[d];
        }
      }
    }
  }
  Tensor result(q.shape(), std::move(out));
  Tape* tape = Tape::active();
  if (tape == nullptr || !(q.requires_grad() || k.requires_grad() || v.requires_grad())) return result;

  result.set_requires_grad(true);
  auto sq = q.storage(), sk = k.storage(), sv = v.storage();
  const bool causal = spec.causal;
  tape->record(result, [sq, sk, sv, ql, kl, geo, causal, probs = std::move(probs)](const std::vector<double>& g) {
    std::vector<double>* gq = sq->requires_grad ? &grad_buffer(sq) : nullptr;
    std::vector<double>* gk = sk->requires_grad ? &grad_buffer(sk) : nullptr;
    std::vector<double>* gv = sv->requires_grad ? &grad_buffer(sv) : nullptr;
    std::vector<double> dscore(geo.lk);
    for (std::size_t gi = 0; gi < geo.groups; ++gi) {
      for (std::size_t h = 0; h < geo.heads; ++h) {
        const std::size_t off = h * geo.head_dim;
        const double* block = probs.data() + (gi * geo.heads + h) * geo.lq * geo.lk;
        for (std::size_t p = 0; p < geo.lq; ++p) {
          const std::size_t qr = ql.row(gi, p);
          const double* grow = g.data() + qr * geo.width + off;
          const double* prow = block + p * geo.lk;
          const std::size_t vis = geo.visible(p, causal);
          double dot = 0.0;
          for (std::size_t j = 0; j < vis; ++j) {
            const std::size_t kr = kl.row(gi, j);
            const double* vrow = sv->data.data() + kr * geo.width + off;
            double dp = 0.0;
            for (std::size_t d = 0; d < geo.head_dim; ++d) dp += grow[d] * vrow[d];
            dscore[j] = dp;
            dot += dp * prow[j];
            if (gv) {
              double* gvrow = gv->data() + kr * geo.width + off;
              for (std::size_t d = 0; d < geo.head_dim; ++d) gvrow[d] += prow[j] * grow[d];
            }
          }
          const double* qrow = sq->data.data() + qr * geo.width + off;
          for (std::size_t j = 0; j < vis; ++j) {
            const double ds = prow[j] * (dscore[j] - dot) * geo.scale;
            const std::size_t kr = kl.row(gi, j);
            if (gq) {
              const double* krow = sk->data.data() + kr * geo.width + off;
              double* gqrow = gq->data() + qr * geo.width + off;
              for (std::size_t d = 0; d < geo.head_dim; ++d) gqrow[d] += ds * krow[d];
            }
            if (gk) {
              double* gkrow = gk->data() + kr * geo.width + off;
              for (std::size_t d = 0; d < geo.head_dim; ++d) gkrow[d] += ds * qrow[d];
            }
          }
        }
      }
    }
  });
  return result;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, AttentionSpec spec) {
  return attention(q, k, v, SeqLayout::single(q.rows()), SeqLayout::single(k.rows()), spec);
}

Tensor attention_weights(const Tensor& q, const Tensor& k, const SeqLayout& ql, const SeqLayout& kl,
                         AttentionSpec spec) {
  const Geometry geo = check(q, k, nullptr, ql, kl, spec);
  return Tensor({geo.groups, geo.heads, geo.lq, geo.lk}, compute_probs(q, k, ql, kl, geo, spec.causal));
}

Tensor attention_weights(const Tensor& q, const Tensor& k, AttentionSpec spec) {
  return attention_weights(q, k, SeqLayout::single(q.rows()), SeqLayout::single(k.rows()), spec);
}

}  // namespace ct2rep
