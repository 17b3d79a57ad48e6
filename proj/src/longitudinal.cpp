#include "ct2rep/longitudinal.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace ct2rep {

std::vector<LongitudinalPair> build_pairs(const std::vector<ManifestEntry>& entries) {
  struct Visit {
    const ManifestEntry* entry;
    std::int64_t time;
  };
  std::vector<std::string> order;
  std::map<std::string, std::vector<Visit>> by_patient;
  for (const auto& e : entries) {
    const std::int64_t t = parse_study_time(e.meta.study_time);
    auto [it, inserted] = by_patient.try_emplace(e.meta.patient_id);
    if (inserted) order.push_back(e.meta.patient_id);
    it->second.push_back({&e, t});
  }
  std::vector<LongitudinalPair> pairs;
  for (const auto& patient : order) {
    auto& visits = by_patient[patient];
    std::stable_sort(visits.begin(), visits.end(), [](const Visit& a, const Visit& b) {
      if (a.time != b.time) return a.time < b.time;
      return a.entry->meta.source_path < b.entry->meta.source_path;
    });
    for (std::size_t i = 0; i < visits.size(); ++i) {
      for (std::size_t j = i + 1; j < visits.size(); ++j) {
        pairs.push_back({patient, *visits[i].entry, *visits[j].entry, visits[i].time, visits[j].time});
      }
    }
  }
  return pairs;
}

std::string pair_id(const std::string& old_id, const std::string& new_id) { return new_id + "@" + old_id; }

nlohmann::json to_pairs_row(const LongitudinalPair& pair, const std::string& old_payload,
                            const std::string& new_payload) {
  return {{"patient_id", pair.patient_id},
          {"old", to_manifest_row(pair.old_visit, old_payload)},
          {"new", to_manifest_row(pair.new_visit, new_payload)}};
}

std::vector<LongitudinalPair> load_pairs_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError(IngestionError::Kind::missing_file, "pairs manifest not found: " + path.string());
  std::vector<LongitudinalPair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string context = path.filename().string() + " row " + std::to_string(line_no);
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& ex) {
      throw IngestionError(IngestionError::Kind::malformed_row, context + ": " + ex.what());
    }
    if (!row.is_object() || !row.contains("old") || !row.contains("new")) {
      throw IngestionError(IngestionError::Kind::malformed_row, context + ": expected old and new visits");
    }
    LongitudinalPair p;
    p.old_visit = from_manifest_row(row.at("old"), path.parent_path(), context + " (old)");
    p.new_visit = from_manifest_row(row.at("new"), path.parent_path(), context + " (new)");
    p.patient_id = row.value("patient_id", p.new_visit.meta.patient_id);
    if (p.old_visit.meta.patient_id != p.patient_id || p.new_visit.meta.patient_id != p.patient_id) {
      throw IngestionError(IngestionError::Kind::malformed_row, context + ": visits belong to different patients");
    }
    p.old_time = parse_study_time(p.old_visit.meta.study_time);
    p.new_time = parse_study_time(p.new_visit.meta.study_time);
    if (p.old_time > p.new_time) {
      throw IngestionError(IngestionError::Kind::bad_timestamp, context + ": prior visit is not earlier");
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

// ---------------------------------------------------------------------------

CrossModalAttention CrossModalAttention::init(std::size_t dim, Rng& rng) {
  return {Linear::init(dim, dim, rng), Linear::init(dim, dim, rng), Linear::init(dim, dim, rng)};
}

Tensor CrossModalAttention::weights(const Tensor& a, const Tensor& b) const {
  return reshape(attention_weights(query(a), key(b), {1, false}), {a.rows(), b.rows()});
}

Tensor CrossModalAttention::operator()(const Tensor& a, const Tensor& b) const {
  return attention(query(a), key(b), value(b), {1, false});
}

void CrossModalAttention::visit(const std::string& prefix, const ParamVisitor& f) {
  query.visit(prefix + ".query", f);
  key.visit(prefix + ".key", f);
  value.visit(prefix + ".value", f);
}

PriorFusion PriorFusion::init(const ModelConfig& cfg, Rng& rng) {
  PriorFusion p;
  for (std::size_t l = 0; l < cfg.report_encoder_layers; ++l)
    p.report_encoder.push_back(TransformerBlock::init(cfg.dim, cfg.encoder_heads, cfg.mlp_ratio, rng));
  p.report_norm = LayerNorm::init(cfg.dim);
  p.report_proj = Linear::init(cfg.dim, cfg.dim, rng);
  p.volume_proj = Linear::init(cfg.dim, cfg.dim, rng);
  p.report_to_volume = CrossModalAttention::init(cfg.dim, rng);
  p.volume_to_report = CrossModalAttention::init(cfg.dim, rng);
  p.memory_attn = MultiHeadAttention::init(cfg.dim, cfg.decoder_heads, rng);
  return p;
}

void PriorFusion::visit(const std::string& prefix, const ParamVisitor& f) {
  for (std::size_t l = 0; l < report_encoder.size(); ++l)
    report_encoder[l].visit(prefix + ".report_encoder." + std::to_string(l), f);
  report_norm.visit(prefix + ".report_norm", f);
  report_proj.visit(prefix + ".report_proj", f);
  volume_proj.visit(prefix + ".volume_proj", f);
  report_to_volume.visit(prefix + ".report_to_volume", f);
  volume_to_report.visit(prefix + ".volume_to_report", f);
  memory_attn.visit(prefix + ".memory_attn", f);
}

LongitudinalModel LongitudinalModel::init(const ModelConfig& cfg, Rng& rng) {
  LongitudinalModel m;
  m.base = ReportModel::init(cfg, rng);
  Rng fusion_rng = rng.fork(2);
  m.fusion = PriorFusion::init(cfg, fusion_rng);
  return m;
}

LongitudinalFeatures LongitudinalModel::fuse_prior(const Tensor& h_old_vol, const Tensor& h_old_rep) const {
  if (!h_old_vol.defined() || h_old_vol.dim() != 2 || h_old_vol.rows() == 0) {
    throw ContractError("fuse_prior: prior volume features are empty");
  }
  if (!h_old_rep.defined() || h_old_rep.dim() != 2 || h_old_rep.rows() == 0) {
    throw ContractError("fuse_prior: prior report is empty");
  }
  if (h_old_vol.cols() != config().dim || h_old_rep.cols() != config().dim) {
    throw ShapeError("fuse_prior: prior features must have width " + std::to_string(config().dim));
  }
  Tensor r = h_old_rep;
  const SeqLayout layout = SeqLayout::single(r.rows());
  for (const auto& block : fusion.report_encoder) r = block(r, layout, false);
  LongitudinalFeatures f;
  f.h_rp = fusion.report_proj(fusion.report_norm(r));
  f.h_ip = fusion.volume_proj(h_old_vol);
  f.r_star = fusion.report_to_volume.weights(f.h_rp, f.h_ip);
  f.i_star = fusion.volume_to_report.weights(f.h_ip, f.h_rp);
  f.h_l = concat_rows({fusion.report_to_volume(f.h_rp, f.h_ip), fusion.volume_to_report(f.h_ip, f.h_rp)});
  return f;
}

LongitudinalFeatures LongitudinalModel::encode_prior(const Volume3D& x_old, std::span<const std::size_t> r_old) const {
  if (r_old.empty()) throw ContractError("fuse_prior: prior report is empty");
  const Tensor rep = add(base.embed_tokens(r_old), sinusoidal_positions(0, r_old.size(), config().dim));
  return fuse_prior(base.encode_volume(x_old), rep);
}

MemoryContext LongitudinalModel::memory_context(const LongitudinalFeatures& f) const {
  return MemoryContext::build(fusion.memory_attn, f.h_l);
}

Tensor LongitudinalModel::loss(const Volume3D& x_new, const Volume3D& x_old, std::span<const std::size_t> r_old,
                               std::span<const std::size_t> r_new) const {
  const LongitudinalFeatures f = encode_prior(x_old, r_old);
  const MemoryContext ctx = memory_context(f);
  return base.loss_from_features(base.encode(x_new), r_new, &ctx);
}

StepOutput LongitudinalModel::decode_step_long(const Tensor& h_new, std::span<const std::size_t> prefix,
                                               const LongitudinalFeatures& f) const {
  const MemoryContext ctx = memory_context(f);
  return base.decode_step(h_new, prefix, &ctx);
}

std::vector<std::size_t> LongitudinalModel::generate_long(const Volume3D& x_new, const Volume3D& x_old,
                                                          std::span<const std::size_t> r_old,
                                                          const DecodeOptions& opts) const {
  const LongitudinalFeatures f = encode_prior(x_old, r_old);
  const MemoryContext ctx = memory_context(f);
  return base.generate_from_features(base.encode(x_new), opts, &ctx);
}

void LongitudinalModel::zero_longitudinal() { fusion.memory_attn.out.zero(); }

void LongitudinalModel::visit(const ParamVisitor& f) {
  base.visit(f);
  fusion.visit("longitudinal", f);
}

std::vector<std::pair<std::string, Tensor>> named_parameters(LongitudinalModel& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  model.visit([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

double train_step_long(LongitudinalModel& model, Adam& adam, const Volume3D& x_new, const Volume3D& x_old,
                       std::span<const std::size_t> r_old, std::span<const std::size_t> r_new, double lr_scale) {
  adam.zero_grad();
  Tape tape;
  double value = 0.0;
  {
    TapeScope scope(tape);
    const Tensor loss = model.loss(x_new, x_old, r_old, r_new);
    value = loss.item();
    backward(loss, tape);
  }
  adam.step(lr_scale);
  return value;
}

}  // namespace ct2rep
