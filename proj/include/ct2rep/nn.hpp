#pragma once

// Parameterized building blocks shared by the vision encoder, the report
// encoder/decoder and the longitudinal fusion module.

#include <cstddef>
#include <functional>
#include <string>

#include "ct2rep/attention.hpp"
#include "ct2rep/rng.hpp"
#include "ct2rep/tensor.hpp"

namespace ct2rep {

// Called once per parameter with its fully qualified name.
using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;

inline constexpr double kNormEps = 1e-6;

// Leaf tensor that participates in gradients.
Tensor make_param(Shape shape, std::vector<double> data);
// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
Tensor init_uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng);
// normal(0, 0.02)
Tensor init_embedding(std::size_t rows, std::size_t cols, Rng& rng);

// y = x W + b
struct Linear {
  Tensor weight;  // [in × out]
  Tensor bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
  void zero();
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm init(std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, kNormEps); }
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct FeedForward {
  Linear up;
  Linear down;

  static FeedForward init(std::size_t dim, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const { return down(gelu(up(x))); }
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct MultiHeadAttention {
  Linear query, key, value, out;
  std::size_t heads = 1;

  static MultiHeadAttention init(std::size_t dim, std::size_t heads, Rng& rng);
  Tensor operator()(const Tensor& q_in, const Tensor& kv_in, const SeqLayout& q_layout,
                    const SeqLayout& kv_layout, bool causal) const;
  Tensor operator()(const Tensor& q_in, const Tensor& kv_in, bool causal = false) const;
  // Weights of the scaled dot-product stage, [groups, heads, Lq, Lk].
  Tensor weights(const Tensor& q_in, const Tensor& kv_in, const SeqLayout& q_layout,
                 const SeqLayout& kv_layout, bool causal) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

// Pre-norm self-attention block: x + MHA(LN(x)), then x + MLP(LN(x)).
struct TransformerBlock {
  LayerNorm norm_attn;
  MultiHeadAttention attn;
  LayerNorm norm_mlp;
  FeedForward mlp;

  static TransformerBlock init(std::size_t dim, std::size_t heads, std::size_t mlp_ratio, Rng& rng);
  Tensor operator()(const Tensor& x, const SeqLayout& layout, bool causal) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

}  // namespace ct2rep
