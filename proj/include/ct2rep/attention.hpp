#pragma once

// Fused scaled dot-product multi-head attention,
// softmax(Q Kᵀ / sqrt(d_k)) V per head, over independent sequence groups.

#include <cstddef>
#include <vector>

#include "ct2rep/tensor.hpp"

namespace ct2rep {

// Describes where the rows of one or more sequences live inside a matrix:
// element p of group g is row bases[g] + p * pos_stride.
struct SeqLayout {
  std::vector<std::size_t> bases;
  std::size_t length = 0;
  std::size_t pos_stride = 1;

  std::size_t groups() const { return bases.size(); }
  std::size_t row(std::size_t g, std::size_t p) const { return bases[g] + p * pos_stride; }

  static SeqLayout contiguous(std::size_t groups, std::size_t length);
  static SeqLayout single(std::size_t length) { return contiguous(1, length); }
};

struct AttentionSpec {
  std::size_t heads = 1;
  // Query p may only see keys j <= p + (key length - query length).
  bool causal = false;
};

// q: rows laid out by q_layout; k and v share kv_layout. The output has the
// shape of q. Every row of q must be covered by q_layout.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const SeqLayout& q_layout,
                 const SeqLayout& kv_layout, AttentionSpec spec);

// Single-sequence convenience overload.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, AttentionSpec spec);

// Attention weights only, shape [groups, heads, Lq, Lk]; masked entries are 0.
Tensor attention_weights(const Tensor& q, const Tensor& k, const SeqLayout& q_layout,
                         const SeqLayout& kv_layout, AttentionSpec spec);
Tensor attention_weights(const Tensor& q, const Tensor& k, AttentionSpec spec);

}  // namespace ct2rep
