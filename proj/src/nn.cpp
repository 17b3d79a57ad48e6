#include "ct2rep/nn.hpp"

#include <algorithm>
#include <cmath>

namespace ct2rep {

Tensor make_param(Shape shape, std::vector<double> data) {
  return Tensor(std::move(shape), std::move(data), /*requires_grad=*/true);
}

Tensor init_uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return make_param(std::move(shape), std::move(data));
}

Tensor init_embedding(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<double> data(rows * cols);
  for (double& v : data) v = rng.normal(0.0, 0.02);
  return make_param({rows, cols}, std::move(data));
}

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng) {
  Linear l;
  l.weight = init_uniform_fan_in({in, out}, in, rng);
  l.bias = init_uniform_fan_in({out}, in, rng);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const { return add_rowwise(matmul(x, weight), bias); }

void Linear::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".weight", weight);
  f(prefix + ".bias", bias);
}

void Linear::zero() {
  std::ranges::fill(weight.mutable_data(), 0.0);
  std::ranges::fill(bias.mutable_data(), 0.0);
}

LayerNorm LayerNorm::init(std::size_t dim) {
  return {make_param({dim}, std::vector<double>(dim, 1.0)), make_param({dim}, std::vector<double>(dim, 0.0))};
}

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".gamma", gamma);
  f(prefix + ".beta", beta);
}

FeedForward FeedForward::init(std::size_t dim, std::size_t hidden, Rng& rng) {
  FeedForward ff;
  ff.up = Linear::init(dim, hidden, rng);
  ff.down = Linear::init(hidden, dim, rng);
  return ff;
}

void FeedForward::visit(const std::string& prefix, const ParamVisitor& f) {
  up.visit(prefix + ".up", f);
  down.visit(prefix + ".down", f);
}

MultiHeadAttention MultiHeadAttention::init(std::size_t dim, std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw ShapeError("attention width " + std::to_string(dim) + " not divisible by " + std::to_string(heads));
  }
  MultiHeadAttention m;
  m.query = Linear::init(dim, dim, rng);
  m.key = Linear::init(dim, dim, rng);
  m.value = Linear::init(dim, dim, rng);
  m.out = Linear::init(dim, dim, rng);
  m.heads = heads;
  return m;
}

Tensor MultiHeadAttention::operator()(const Tensor& q_in, const Tensor& kv_in, const SeqLayout& q_layout,
                                      const SeqLayout& kv_layout, bool causal) const {
  Tensor mixed = attention(query(q_in), key(kv_in), value(kv_in), q_layout, kv_layout, {heads, causal});
  return out(mixed);
}

Tensor MultiHeadAttention::operator()(const Tensor& q_in, const Tensor& kv_in, bool causal) const {
  return (*this)(q_in, kv_in, SeqLayout::single(q_in.rows()), SeqLayout::single(kv_in.rows()), causal);
}

Tensor MultiHeadAttention::weights(const Tensor& q_in, const Tensor& kv_in, const SeqLayout& q_layout,
                                   const SeqLayout& kv_layout, bool causal) const {
  return attention_weights(query(q_in), key(kv_in), q_layout, kv_layout, {heads, causal});
}

void MultiHeadAttention::visit(const std::string& prefix, const ParamVisitor& f) {
  query.visit(prefix + ".query", f);
  key.visit(prefix + ".key", f);
  value.visit(prefix + ".value", f);
  out.visit(prefix + ".out", f);
}

TransformerBlock TransformerBlock::init(std::size_t dim, std::size_t heads, std::size_t mlp_ratio, Rng& rng) {
  TransformerBlock b;
  b.norm_attn = LayerNorm::init(dim);
  b.attn = MultiHeadAttention::init(dim, heads, rng);
  b.norm_mlp = LayerNorm::init(dim);
  b.mlp = FeedForward::init(dim, dim * mlp_ratio, rng);
  return b;
}

Tensor TransformerBlock::operator()(const Tensor& x, const SeqLayout& layout, bool causal) const {
  Tensor n1 = norm_attn(x);
  Tensor h = add(x, attn(n1, n1, layout, layout, causal));
  return add(h, mlp(norm_mlp(h)));
}

void TransformerBlock::visit(const std::string& prefix, const ParamVisitor& f) {
  norm_attn.visit(prefix + ".norm_attn", f);
  attn.visit(prefix + ".attn", f);
  norm_mlp.visit(prefix + ".norm_mlp", f);
  mlp.visit(prefix + ".mlp", f);
}

}  // namespace ct2rep
