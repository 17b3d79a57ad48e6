#include "ct2rep/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ct2rep {

// ---------------------------------------------------------------------------
// Relational memory

RelationalMemory RelationalMemory::init(std::size_t dim, std::size_t slots, std::size_t heads, bool gated,
                                        Rng& rng) {
  RelationalMemory m;
  std::vector<double> eye(slots * dim, 0.0);
  for (std::size_t i = 0; i < std::min(slots, dim); ++i) eye[i * dim + i] = 1.0;
  m.initial = make_param({slots, dim}, std::move(eye));
  m.attn = MultiHeadAttention::init(dim, heads, rng);
  m.mlp = FeedForward::init(dim, dim, rng);
  m.input_gate_token = Linear::init(dim, dim, rng);
  m.forget_gate_token = Linear::init(dim, dim, rng);
  m.input_gate_memory = Linear::init(dim, dim, rng);
  m.forget_gate_memory = Linear::init(dim, dim, rng);
  m.gated = gated;
  return m;
}

Tensor RelationalMemory::step(const Tensor& memory, const Tensor& token) const {
  if (memory.rows() != slots() || memory.cols() != dim()) {
    throw ShapeError("rm_update: memory " + shape_str(memory.shape()) + " does not match " +
                     shape_str(initial.shape()));
  }
  if (token.numel() != dim()) {
    throw ShapeError("rm_update: token embedding " + shape_str(token.shape()) + " is not of width " +
                     std::to_string(dim()));
  }
  const Tensor y = token.dim() == 2 ? token : reshape(token, {1, dim()});
  const Tensor keys = concat_rows({memory, y});
  Tensor next = add(memory, attn(memory, keys));
  next = add(next, mlp(next));
  if (!gated) return next;
  const Tensor squashed = tanh(memory);
  const Tensor input_gate = sigmoid(add_rowwise(input_gate_memory(squashed), input_gate_token(y)));
  const Tensor forget_gate = sigmoid(add_rowwise(forget_gate_memory(squashed), forget_gate_token(y)));
  return add(mul(input_gate, tanh(next)), mul(forget_gate, memory));
}

Tensor RelationalMemory::update_weights(const Tensor& memory, const Tensor& token) const {
  const Tensor y = token.dim() == 2 ? token : reshape(token, {1, dim()});
  const Tensor keys = concat_rows({memory, y});
  return attn.weights(memory, keys, SeqLayout::single(memory.rows()), SeqLayout::single(keys.rows()), false);
}

void RelationalMemory::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".initial", initial);
  attn.visit(prefix + ".attn", f);
  mlp.visit(prefix + ".mlp", f);
  input_gate_token.visit(prefix + ".input_gate_token", f);
  forget_gate_token.visit(prefix + ".forget_gate_token", f);
  input_gate_memory.visit(prefix + ".input_gate_memory", f);
  forget_gate_memory.visit(prefix + ".forget_gate_memory", f);
}

// ---------------------------------------------------------------------------
// MCLN

Mcln Mcln::init(std::size_t dim, Rng& rng) {
  Mcln m;
  m.gamma = make_param({dim}, std::vector<double>(dim, 1.0));
  m.beta = make_param({dim}, std::vector<double>(dim, 0.0));
  m.delta_gamma = Linear::init(dim, dim, rng);
  m.delta_beta = Linear::init(dim, dim, rng);
  return m;
}

Tensor Mcln::operator()(const Tensor& x, const Tensor& state) const {
  if (x.dim() != 2 || state.dim() != 2 || x.rows() != state.rows() || x.cols() != gamma.numel() ||
      state.cols() != delta_gamma.weight.rows()) {
    throw ShapeError("mcln: input " + shape_str(x.shape()) + " and memory state " + shape_str(state.shape()) +
                     " disagree");
  }
  const Tensor scale_rows = add_rowwise(delta_gamma(state), gamma);
  const Tensor shift_rows = add_rowwise(delta_beta(state), beta);
  return add(mul(normalize_last(x, kNormEps), scale_rows), shift_rows);
}

void Mcln::zero_deltas() {
  delta_gamma.zero();
  delta_beta.zero();
}

void Mcln::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".gamma", gamma);
  f(prefix + ".beta", beta);
  delta_gamma.visit(prefix + ".delta_gamma", f);
  delta_beta.visit(prefix + ".delta_beta", f);
}

DecoderLayer DecoderLayer::init(const ModelConfig& cfg, Rng& rng) {
  DecoderLayer l;
  l.norm_self = Mcln::init(cfg.dim, rng);
  l.self_attn = MultiHeadAttention::init(cfg.dim, cfg.decoder_heads, rng);
  l.norm_cross = Mcln::init(cfg.dim, rng);
  l.cross_attn = MultiHeadAttention::init(cfg.dim, cfg.decoder_heads, rng);
  l.norm_mlp = Mcln::init(cfg.dim, rng);
  l.mlp = FeedForward::init(cfg.dim, cfg.dim * cfg.mlp_ratio, rng);
  return l;
}

void DecoderLayer::visit(const std::string& prefix, const ParamVisitor& f) {
  norm_self.visit(prefix + ".norm_self", f);
  self_attn.visit(prefix + ".self_attn", f);
  norm_cross.visit(prefix + ".norm_cross", f);
  cross_attn.visit(prefix + ".cross_attn", f);
  norm_mlp.visit(prefix + ".norm_mlp", f);
  mlp.visit(prefix + ".mlp", f);
}

MemoryContext MemoryContext::build(const MultiHeadAttention& attn, const Tensor& context) {
  return {&attn, attn.key(context), attn.value(context)};
}

Tensor MemoryContext::apply(const Tensor& states) const {
  const Tensor mixed = attention(attn->query(states), keys, values, {attn->heads, false});
  return add(states, attn->out(mixed));
}

// ---------------------------------------------------------------------------

Tensor sinusoidal_positions(std::size_t first, std::size_t count, std::size_t dim) {
  std::vector<double> pe(count * dim);
  for (std::size_t p = 0; p < count; ++p) {
    const double pos = static_cast<double>(first + p);
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
      pe[p * dim + i] = i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  }
  return Tensor({count, dim}, std::move(pe));
}

ReportModel ReportModel::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.vocab_size <= kUnk) throw ContractError("model needs a vocabulary beyond the reserved tokens");
  ReportModel m;
  m.cfg_ = cfg;
  Rng visual_rng = rng.fork(1);
  m.visual = VisionEncoder::init(cfg, visual_rng);
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l)
    m.encoder.push_back(TransformerBlock::init(cfg.dim, cfg.encoder_heads, cfg.mlp_ratio, rng));
  m.encoder_norm = LayerNorm::init(cfg.dim);
  m.token_embedding = init_embedding(cfg.vocab_size, cfg.dim, rng);
  m.memory = RelationalMemory::init(cfg.dim, cfg.memory_slots, cfg.memory_heads, cfg.memory_gates, rng);
  m.memory_reduce = Linear::init(cfg.memory_slots * cfg.dim, cfg.dim, rng);
  for (std::size_t l = 0; l < cfg.decoder_layers; ++l) m.decoder.push_back(DecoderLayer::init(cfg, rng));
  m.decoder_norm = LayerNorm::init(cfg.dim);
  m.output = Linear::init(cfg.dim, cfg.vocab_size, rng);
  return m;
}

Tensor ReportModel::encode_volume(const Volume3D& v) const { return visual.encode(v); }

Tensor ReportModel::transformer_encode(const Tensor& z) const {
  if (z.dim() != 2 || z.cols() != cfg_.dim) throw ShapeError("transformer_encode: expected N x D features");
  Tensor x = z;
  const SeqLayout layout = SeqLayout::single(z.rows());
  for (const auto& block : encoder) x = block(x, layout, false);
  return encoder_norm(x);
}

Tensor ReportModel::embed_tokens(std::span<const std::size_t> ids) const {
  return scale(gather_rows(token_embedding, ids), std::sqrt(static_cast<double>(cfg_.dim)));
}

namespace {

Tensor trajectory_from_embeddings(const RelationalMemory& rm, const Tensor& emb, Tensor* final_memory) {
  Tensor m = rm.initial;
  std::vector<Tensor> flat;
  flat.reserve(emb.rows());
  for (std::size_t i = 0; i < emb.rows(); ++i) {
    m = rm.step(m, slice_rows(emb, i, i + 1));
    flat.push_back(reshape(m, {1, m.numel()}));
  }
  if (final_memory) *final_memory = m;
  return concat_rows(flat);
}

}  // namespace

Tensor ReportModel::memory_trajectory(std::span<const std::size_t> ids) const {
  return trajectory_from_embeddings(memory, embed_tokens(ids), nullptr);
}

Tensor ReportModel::memory_states(std::span<const std::size_t> ids, const MemoryContext* ctx) const {
  Tensor states = memory_reduce(memory_trajectory(ids));
  return ctx ? ctx->apply(states) : states;
}

Tensor ReportModel::decoder_stack(const Tensor& x_in, const Tensor& h, const Tensor& states) const {
  Tensor x = x_in;
  for (const auto& layer : decoder) {
    Tensor n = layer.norm_self(x, states);
    x = add(x, layer.self_attn(n, n, /*causal=*/true));
    n = layer.norm_cross(x, states);
    x = add(x, layer.cross_attn(n, h, /*causal=*/false));
    n = layer.norm_mlp(x, states);
    x = add(x, layer.mlp(n));
  }
  return x;
}

Tensor ReportModel::decode_logits(const Tensor& h, std::span<const std::size_t> ids, const MemoryContext* ctx) const {
  if (ids.empty()) throw ContractError("decode: empty token prefix");
  const Tensor emb = embed_tokens(ids);
  Tensor states = memory_reduce(trajectory_from_embeddings(memory, emb, nullptr));
  if (ctx) states = ctx->apply(states);
  const Tensor x = add(emb, sinusoidal_positions(0, ids.size(), cfg_.dim));
  return output(decoder_norm(decoder_stack(x, h, states)));
}

StepOutput ReportModel::decode_step(const Tensor& h, std::span<const std::size_t> prefix,
                                    const MemoryContext* ctx) const {
  if (prefix.empty()) throw ContractError("decode_step: empty token prefix");
  if (prefix.front() != kBos) throw ContractError("decode_step: prefix must start with BOS");
  const Tensor emb = embed_tokens(prefix);
  StepOutput out;
  Tensor states = memory_reduce(trajectory_from_embeddings(memory, emb, &out.memory));
  if (ctx) states = ctx->apply(states);
  const Tensor x = add(emb, sinusoidal_positions(0, prefix.size(), cfg_.dim));
  const Tensor logits = output(decoder_norm(decoder_stack(x, h, states)));
  const auto last = logits.data().subspan((prefix.size() - 1) * logits.cols(), logits.cols());
  out.logits.assign(last.begin(), last.end());
  return out;
}

Tensor ReportModel::loss_from_features(const Tensor& h, std::span<const std::size_t> sequence,
                                       const MemoryContext* ctx) const {
  if (sequence.size() < 2) throw ContractError("loss: target sequence needs at least BOS and one token");
  const Tensor logits = decode_logits(h, sequence.first(sequence.size() - 1), ctx);
  return cross_entropy(logits, sequence.subspan(1), kPad);
}

Tensor ReportModel::loss(const Volume3D& v, std::span<const std::size_t> sequence) const {
  return loss_from_features(encode(v), sequence);
}

DecodeState ReportModel::start_decoding(const Tensor& h, const MemoryContext* ctx) const {
  DecodeState s;
  s.memory = memory.initial;
  for (const auto& layer : decoder) {
    s.cross_keys.push_back(layer.cross_attn.key(h));
    s.cross_values.push_back(layer.cross_attn.value(h));
    s.self_keys.emplace_back();
    s.self_values.emplace_back();
  }
  if (ctx) s.context = *ctx;
  return s;
}

std::vector<double> ReportModel::advance(DecodeState& s, std::size_t token) const {
  const std::size_t ids[1] = {token};
  const Tensor emb = embed_tokens(ids);
  s.memory = memory.step(s.memory, emb);
  Tensor state = memory_reduce(reshape(s.memory, {1, s.memory.numel()}));
  if (s.context) state = s.context->apply(state);
  Tensor x = add(emb, sinusoidal_positions(s.position, 1, cfg_.dim));
  for (std::size_t l = 0; l < decoder.size(); ++l) {
    const DecoderLayer& layer = decoder[l];
    Tensor n = layer.norm_self(x, state);
    const Tensor k = layer.self_attn.key(n);
    const Tensor v = layer.self_attn.value(n);
    s.self_keys[l] = s.self_keys[l].defined() ? concat_rows({s.self_keys[l], k}) : k;
    s.self_values[l] = s.self_values[l].defined() ? concat_rows({s.self_values[l], v}) : v;
    const Tensor self_mix =
        attention(layer.self_attn.query(n), s.self_keys[l], s.self_values[l], {layer.self_attn.heads, false});
    x = add(x, layer.self_attn.out(self_mix));
    n = layer.norm_cross(x, state);
    const Tensor cross_mix =
        attention(layer.cross_attn.query(n), s.cross_keys[l], s.cross_values[l], {layer.cross_attn.heads, false});
    x = add(x, layer.cross_attn.out(cross_mix));
    x = add(x, layer.mlp(layer.norm_mlp(x, state)));
  }
  ++s.position;
  const Tensor logits = output(decoder_norm(x));
  return {logits.data().begin(), logits.data().end()};
}

namespace {

bool emittable(std::size_t id) { return id != kPad && id != kBos; }

}  // namespace

std::vector<std::size_t> greedy_decode(const ReportModel& model, DecodeState state, std::size_t max_tokens) {
  std::vector<std::size_t> seq{kBos};
  std::size_t last = kBos;
  for (std::size_t n = 0; n < max_tokens; ++n) {
    const auto logits = model.advance(state, last);
    std::size_t best = logits.size();
    for (std::size_t id = 0; id < logits.size(); ++id) {
      if (!emittable(id)) continue;
      if (best == logits.size() || logits[id] > logits[best]) best = id;
    }
    seq.push_back(best);
    if (best == kEos) break;
    last = best;
  }
  return seq;
}

std::vector<std::size_t> beam_decode(const ReportModel& model, DecodeState state, std::size_t beam_size,
                                     std::size_t max_tokens) {
  if (beam_size == 0) throw ContractError("beam search needs beam_size >= 1");
  struct Hypothesis {
    std::vector<std::size_t> ids;
    double logp = 0.0;
    DecodeState state;
  };
  struct Candidate {
    double score;
    std::size_t parent;
    std::size_t token;
  };
  std::vector<Hypothesis> live{{{kBos}, 0.0, std::move(state)}};
  std::vector<Hypothesis> finished;
  for (std::size_t n = 0; n < max_tokens && !live.empty() && finished.size() < beam_size; ++n) {
    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      const auto lp = log_softmax_row(model.advance(live[b].state, live[b].ids.back()));
      for (std::size_t id = 0; id < lp.size(); ++id) {
        if (emittable(id)) cands.push_back({live[b].logp + lp[id], b, id});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& c) {
      if (a.score != c.score) return a.score > c.score;
      if (a.parent != c.parent) return a.parent < c.parent;
      return a.token < c.token;
    });
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < std::min(beam_size, cands.size()); ++i) {
      const Candidate& c = cands[i];
      Hypothesis h{live[c.parent].ids, c.score, live[c.parent].state};
      h.ids.push_back(c.token);
      (c.token == kEos ? finished : next).push_back(std::move(h));
    }
    live = std::move(next);
  }
  const std::vector<Hypothesis>* pools[2] = {&finished, &live};
  const Hypothesis* best = nullptr;
  double best_score = -std::numeric_limits<double>::infinity();
  for (const auto* pool : pools) {
    if (pool == &live && !finished.empty()) break;
    for (const auto& h : *pool) {
      const double normalized = h.logp / static_cast<double>(h.ids.size() - 1);
      if (best == nullptr || normalized > best_score) {
        best = &h;
        best_score = normalized;
      }
    }
  }
  return best ? best->ids : std::vector<std::size_t>{kBos};
}

std::vector<std::size_t> ReportModel::generate_from_features(const Tensor& h, const DecodeOptions& opts,
                                                             const MemoryContext* ctx) const {
  DecodeState s = start_decoding(h, ctx);
  if (opts.mode == DecodeMode::beam) return beam_decode(*this, std::move(s), opts.beam_size, opts.max_tokens);
  return greedy_decode(*this, std::move(s), opts.max_tokens);
}

std::vector<std::size_t> ReportModel::generate(const Volume3D& v, const DecodeOptions& opts) const {
  return generate_from_features(encode(v), opts);
}

void ReportModel::visit(const ParamVisitor& f) {
  visual.visit("visual", f);
  for (std::size_t l = 0; l < encoder.size(); ++l) encoder[l].visit("encoder." + std::to_string(l), f);
  encoder_norm.visit("encoder.norm", f);
  f("decoder.token_embedding", token_embedding);
  memory.visit("decoder.memory", f);
  memory_reduce.visit("decoder.memory_reduce", f);
  for (std::size_t l = 0; l < decoder.size(); ++l) decoder[l].visit("decoder." + std::to_string(l), f);
  decoder_norm.visit("decoder.norm", f);
  output.visit("decoder.output", f);
}

// ---------------------------------------------------------------------------

bool is_visual_param(const std::string& name) { return name.rfind("visual.", 0) == 0; }

std::vector<std::pair<std::string, Tensor>> named_parameters(ReportModel& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  model.visit([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

Adam make_optimizer(const std::vector<std::pair<std::string, Tensor>>& params, const OptimizerSettings& s) {
  Adam adam(s.hyper);
  const std::size_t visual = adam.add_group(s.lr_visual);
  const std::size_t other = adam.add_group(s.lr_other);
  for (const auto& [name, t] : params) adam.add(name, t, is_visual_param(name) ? visual : other);
  return adam;
}

double train_step(ReportModel& model, Adam& adam, const Volume3D& volume, std::span<const std::size_t> sequence,
                  double lr_scale) {
  adam.zero_grad();
  Tape tape;
  double value = 0.0;
  {
    TapeScope scope(tape);
    const Tensor loss = model.loss(volume, sequence);
    value = loss.item();
    backward(loss, tape);
  }
  adam.step(lr_scale);
  return value;
}

}  // namespace ct2rep
