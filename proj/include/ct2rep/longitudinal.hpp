#pragma once

// Longitudinal report generation: a prior visit (volume and report) is fused
// by two cross-attentions and the result conditions the relational-memory
// state that drives MCLN in the base decoder.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ct2rep/model.hpp"

namespace ct2rep {

// Two visits of one patient, earlier first.
struct LongitudinalPair {
  std::string patient_id;
  ManifestEntry old_visit;
  ManifestEntry new_visit;
  std::int64_t old_time = 0;
  std::int64_t new_time = 0;
};

// Every (earlier, later) combination per patient, patients in order of first
// appearance. Equal study times are ordered by source path.
std::vector<LongitudinalPair> build_pairs(const std::vector<ManifestEntry>& entries);

// "<new id>@<old id>": names a pair's generated report.
std::string pair_id(const std::string& old_id, const std::string& new_id);
inline std::string pair_id(const LongitudinalPair& p) { return pair_id(p.old_visit.id, p.new_visit.id); }

// Pairs manifest row: {patient_id, old: <manifest row>, new: <manifest row>}.
nlohmann::json to_pairs_row(const LongitudinalPair& pair, const std::string& old_payload,
                            const std::string& new_payload);
std::vector<LongitudinalPair> load_pairs_manifest(const std::filesystem::path& path);

struct LongitudinalFeatures {
  Tensor h_ip;    // projected prior-volume features
  Tensor h_rp;    // projected prior-report features
  Tensor r_star;  // [rows(h_rp) × rows(h_ip)]
  Tensor i_star;  // [rows(h_ip) × rows(h_rp)]
  Tensor h_l;     // [R*·v(H_IP) ; I*·v(H_RP)]
};

// Single-head attention without output projection.
struct CrossModalAttention {
  Linear query, key, value;

  static CrossModalAttention init(std::size_t dim, Rng& rng);
  // softmax(q(a) k(b)ᵀ / sqrt(d)) and its product with v(b).
  Tensor weights(const Tensor& a, const Tensor& b) const;
  Tensor operator()(const Tensor& a, const Tensor& b) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct PriorFusion {
  std::vector<TransformerBlock> report_encoder;
  LayerNorm report_norm;
  Linear report_proj;  // -> H_RP
  Linear volume_proj;  // -> H_IP
  CrossModalAttention report_to_volume;  // R*
  CrossModalAttention volume_to_report;  // I*
  MultiHeadAttention memory_attn;        // memory state against H_L

  static PriorFusion init(const ModelConfig& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

class LongitudinalModel {
 public:
  static LongitudinalModel init(const ModelConfig& cfg, Rng& rng);
  const ModelConfig& config() const { return base.config(); }

  // h_old_vol: encode_volume(x_old); h_old_rep: embedded prior report
  // tokens with positions. Throws ContractError on an empty input.
  LongitudinalFeatures fuse_prior(const Tensor& h_old_vol, const Tensor& h_old_rep) const;
  LongitudinalFeatures encode_prior(const Volume3D& x_old, std::span<const std::size_t> r_old) const;
  MemoryContext memory_context(const LongitudinalFeatures& f) const;

  Tensor loss(const Volume3D& x_new, const Volume3D& x_old, std::span<const std::size_t> r_old,
              std::span<const std::size_t> r_new) const;
  StepOutput decode_step_long(const Tensor& h_new, std::span<const std::size_t> prefix,
                              const LongitudinalFeatures& f) const;
  std::vector<std::size_t> generate_long(const Volume3D& x_new, const Volume3D& x_old,
                                         std::span<const std::size_t> r_old, const DecodeOptions& opts) const;

  // Zeroes the output projection of the memory cross-attention, which makes
  // the model decode exactly like `base`.
  void zero_longitudinal();
  void visit(const ParamVisitor& f);

  ReportModel base;
  PriorFusion fusion;
};

std::vector<std::pair<std::string, Tensor>> named_parameters(LongitudinalModel& model);

double train_step_long(LongitudinalModel& model, Adam& adam, const Volume3D& x_new, const Volume3D& x_old, std::span<const std::size_t> r_old,
                       std::span<const std::size_t> r_new, double lr_scale = 1.0);

}  // namespace ct2rep
