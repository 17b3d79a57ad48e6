#pragma once

// Report generator: transformer encoder over CT tokens and an
// auto-regressive decoder whose layer norms are conditioned on a relational
// memory (MCLN). Teacher-forced training and incremental decoding share the
// same parameters and produce the same logits.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ct2rep/config.hpp"
#include "ct2rep/nn.hpp"
#include "ct2rep/optim.hpp"
#include "ct2rep/text.hpp"
#include "ct2rep/vision.hpp"

namespace ct2rep {

// S×D memory matrix updated once per decoded token.
struct RelationalMemory {
  Tensor initial;  // M_0
  MultiHeadAttention attn;
  FeedForward mlp;
  Linear input_gate_token, forget_gate_token;    // from y_{t-1}
  Linear input_gate_memory, forget_gate_memory;  // from tanh(M_{t-1})
  bool gated = true;

  static RelationalMemory init(std::size_t dim, std::size_t slots, std::size_t heads, bool gated, Rng& rng);
  std::size_t slots() const { return initial.rows(); }
  std::size_t dim() const { return initial.cols(); }

  // M_t from M_{t-1} [S×D] and the previous token embedding y [1×D]:
  // queries from M_{t-1}, keys/values from [M_{t-1}; y], residual MLP, then
  // M_t = forget ⊙ M_{t-1} + input ⊙ tanh(candidate).
  Tensor step(const Tensor& memory, const Tensor& token) const;
  // Attention weights of the update, [1, heads, S, S+1].
  Tensor update_weights(const Tensor& memory, const Tensor& token) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

// Layer norm whose scale and shift receive deltas predicted from the memory
// state: norm(x) ⊙ (γ + Δγ) + (β + Δβ).
struct Mcln {
  Tensor gamma;
  Tensor beta;
  Linear delta_gamma;
  Linear delta_beta;

  static Mcln init(std::size_t dim, Rng& rng);
  // x and state are [L×D]; row i of x is conditioned on row i of state.
  Tensor operator()(const Tensor& x, const Tensor& state) const;
  void zero_deltas();
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct DecoderLayer {
  Mcln norm_self, norm_cross, norm_mlp;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward mlp;

  static DecoderLayer init(const ModelConfig& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

// Optional cross-attention of the memory state against extra context
// (the fused longitudinal features): state + out(Attn(q(state), K, V)).
struct MemoryContext {
  const MultiHeadAttention* attn = nullptr;
  Tensor keys;    // projected context [rows × D]
  Tensor values;  // projected context [rows × D]

  static MemoryContext build(const MultiHeadAttention& attn, const Tensor& context);
  Tensor apply(const Tensor& states) const;
};

// Incremental decoding state: current memory, per-layer self-attention
// key/value caches and the projected encoder states.
struct DecodeState {
  Tensor memory;
  std::vector<Tensor> self_keys, self_values;
  std::vector<Tensor> cross_keys, cross_values;
  std::optional<MemoryContext> context;
  std::size_t position = 0;
};

struct StepOutput {
  std::vector<double> logits;
  Tensor memory;  // M_t after consuming the last prefix token
};

enum class DecodeMode { greedy, beam };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::greedy;
  std::size_t beam_size = 3;
  std::size_t max_tokens = kMaxReportTokens;
};

class ReportModel {
 public:
  static ReportModel init(const ModelConfig& cfg, Rng& rng);
  const ModelConfig& config() const { return cfg_; }

  // Φ_visual: N×D CT tokens.
  Tensor encode_volume(const Volume3D& v) const;
  // Φ_enc: bidirectional transformer over the CT tokens.
  Tensor transformer_encode(const Tensor& z) const;
  Tensor encode(const Volume3D& v) const { return transformer_encode(encode_volume(v)); }

  // Scaled token embeddings [L×D] (no position term).
  Tensor embed_tokens(std::span<const std::size_t> ids) const;
  // Flattened memory M_1..M_L [L × S·D] for input tokens ids[0..L-1].
  Tensor memory_trajectory(std::span<const std::size_t> ids) const;
  // Memory conditioning for MCLN [L×D], optionally attended against ctx.
  Tensor memory_states(std::span<const std::size_t> ids, const MemoryContext* ctx = nullptr) const;

  // Teacher-forced logits [L×V]; row i predicts the token after ids[i].
  Tensor decode_logits(const Tensor& h, std::span<const std::size_t> ids, const MemoryContext* ctx = nullptr) const;
  // Stateless step over a full prefix (must start with BOS).
  StepOutput decode_step(const Tensor& h, std::span<const std::size_t> prefix, const MemoryContext* ctx = nullptr) const;

  // Mean next-token cross-entropy of a BOS...EOS sequence; PAD is masked.
  Tensor loss_from_features(const Tensor& h, std::span<const std::size_t> sequence,
                            const MemoryContext* ctx = nullptr) const;
  Tensor loss(const Volume3D& v, std::span<const std::size_t> sequence) const;

  DecodeState start_decoding(const Tensor& h, const MemoryContext* ctx = nullptr) const;
  // Consumes `token` at the state's position and returns next-token logits.
  std::vector<double> advance(DecodeState& state, std::size_t token) const;

  // Sequences start with BOS; at most opts.max_tokens tokens follow it.
  std::vector<std::size_t> generate(const Volume3D& v, const DecodeOptions& opts) const;
  std::vector<std::size_t> generate_from_features(const Tensor& h, const DecodeOptions& opts,
                                                  const MemoryContext* ctx = nullptr) const;

  void visit(const ParamVisitor& f);

  VisionEncoder visual;
  std::vector<TransformerBlock> encoder;
  LayerNorm encoder_norm;
  Tensor token_embedding;  // [V×D]
  RelationalMemory memory;
  Linear memory_reduce;  // S·D -> D
  std::vector<DecoderLayer> decoder;
  LayerNorm decoder_norm;
  Linear output;  // D -> V

 private:
  Tensor decoder_stack(const Tensor& x, const Tensor& h, const Tensor& states) const;
  ModelConfig cfg_;
};

// Sinusoidal positions [count × dim] starting at `first`.
Tensor sinusoidal_positions(std::size_t first, std::size_t count, std::size_t dim);

std::vector<std::size_t> greedy_decode(const ReportModel& model, DecodeState state, std::size_t max_tokens);
std::vector<std::size_t> beam_decode(const ReportModel& model, DecodeState state, std::size_t beam_size,
                                     std::size_t max_tokens);

// Two learning-rate groups: parameters named "visual.*" and everything else.
struct OptimizerSettings {
  double lr_visual = 5e-5;
  double lr_other = 1e-4;
  AdamHyper hyper{};
};

bool is_visual_param(const std::string& name);
Adam make_optimizer(const std::vector<std::pair<std::string, Tensor>>& params, const OptimizerSettings& s);
std::vector<std::pair<std::string, Tensor>> named_parameters(ReportModel& model);

// Teacher-forced step with backward and one Adam update; returns the loss.
double train_step(ReportModel& model, Adam& adam, const Volume3D& volume, std::span<const std::size_t> sequence,
                  double lr_scale = 1.0);

}  // namespace ct2rep
