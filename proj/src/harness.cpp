#include "ct2rep/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace ct2rep {

const char* kind_name(ModelKind kind) { return kind == ModelKind::base ? "base" : "long"; }

ModelKind parse_kind(const std::string& s) {
  if (s == "base") return ModelKind::base;
  if (s == "long" || s == "longitudinal") return ModelKind::longitudinal;
  throw ContractError("unknown mode '" + s + "' (expected base or long)");
}

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::paper() { return RunConfig{}; }

RunConfig RunConfig::desk() {
  RunConfig c;
  c.model = ModelConfig::desk();
  c.preprocess = {{15.0, 7.5, 7.5}, {24, 48, 48}};
  c.optimizer.lr_visual = 5e-4;
  c.optimizer.lr_other = 1e-3;
  c.lr_step_epochs = 0;
  c.epochs = 250;
  c.max_steps = 2000;
  c.checkpoint_every_epochs = 50;
  return c;
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{
      {"model", c.model},
      {"preprocess",
       {{"target_spacing", c.preprocess.target_spacing}, {"target_shape", c.preprocess.target_shape}}},
      {"vocab_min_count", c.vocab_min_count},
      {"optimizer",
       {{"lr_visual", c.optimizer.lr_visual},
        {"lr_other", c.optimizer.lr_other},
        {"beta1", c.optimizer.hyper.beta1},
        {"beta2", c.optimizer.hyper.beta2},
        {"eps", c.optimizer.hyper.eps}}},
      {"scheduler", {{"gamma", c.lr_gamma}, {"step_epochs", c.lr_step_epochs}}},
      {"epochs", c.epochs},
      {"max_steps", c.max_steps},
      {"checkpoint_every_epochs", c.checkpoint_every_epochs},
      {"max_tokens", c.max_tokens},
      {"decode", {{"mode", c.decode_mode == DecodeMode::greedy ? "greedy" : "beam"}, {"beam_size", c.beam_size}}},
      {"seed", c.seed},
      {"mode", kind_name(c.kind)},
      {"zero_priors", c.zero_priors},
  };
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  RunConfig d = c;
  auto read = [](const nlohmann::json& obj, const char* key, auto& field) {
    if (obj.contains(key)) obj.at(key).get_to(field);
  };
  if (j.contains("model")) from_json(j.at("model"), d.model);
  if (j.contains("preprocess")) {
    read(j.at("preprocess"), "target_spacing", d.preprocess.target_spacing);
    read(j.at("preprocess"), "target_shape", d.preprocess.target_shape);
  }
  read(j, "vocab_min_count", d.vocab_min_count);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    read(o, "lr_visual", d.optimizer.lr_visual);
    read(o, "lr_other", d.optimizer.lr_other);
    read(o, "beta1", d.optimizer.hyper.beta1);
    read(o, "beta2", d.optimizer.hyper.beta2);
    read(o, "eps", d.optimizer.hyper.eps);
  }
  if (j.contains("scheduler")) {
    read(j.at("scheduler"), "gamma", d.lr_gamma);
    read(j.at("scheduler"), "step_epochs", d.lr_step_epochs);
  }
  read(j, "epochs", d.epochs);
  read(j, "max_steps", d.max_steps);
  read(j, "checkpoint_every_epochs", d.checkpoint_every_epochs);
  read(j, "max_tokens", d.max_tokens);
  if (j.contains("decode")) {
    const auto& dec = j.at("decode");
    if (dec.contains("mode")) {
      const auto m = dec.at("mode").get<std::string>();
      if (m != "greedy" && m != "beam") throw ContractError("decode mode must be greedy or beam, got " + m);
      d.decode_mode = m == "greedy" ? DecodeMode::greedy : DecodeMode::beam;
    }
    read(dec, "beam_size", d.beam_size);
  }
  read(j, "seed", d.seed);
  if (j.contains("mode")) d.kind = parse_kind(j.at("mode").get<std::string>());
  read(j, "zero_priors", d.zero_priors);
  c = d;
}

// ---------------------------------------------------------------------------
// Checkpoint file format

namespace {

constexpr char kMagic[8] = {'C', 'T', '2', 'R', 'E', 'P', 'C', 'K'};

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& in, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

nlohmann::json array_index(const std::vector<NamedArray>& arrays) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& a : arrays) out.push_back({{"name", a.name}, {"shape", a.shape}});
  return out;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json header = {{"config", ck.config},
                           {"kind", kind_name(ck.kind)},
                           {"step", ck.step},
                           {"epoch", ck.epoch},
                           {"epoch_offset", ck.epoch_offset},
                           {"vocab", ck.vocab},
                           {"weights", array_index(ck.weights)},
                           {"adam_m", array_index(ck.adam_m)},
                           {"adam_v", array_index(ck.adam_v)}};
  const std::string text = header.dump();
  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto* group : {&ck.weights, &ck.adam_m, &ck.adam_v}) {
    for (const auto& a : *group) {
      if (a.data.size() != shape_numel(a.shape) && !(a.shape.empty() && a.data.empty())) {
        throw CheckpointError("array " + a.name + " has " + std::to_string(a.data.size()) +
                              " values for shape " + shape_str(a.shape));
      }
      for (double d : a.data) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, sizeof bits);
        put_le<std::uint64_t>(out, bits);
      }
    }
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  const std::size_t fixed = sizeof kMagic + 4 + 8;
  if (bytes.size() < fixed || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a ct2rep checkpoint (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(bytes, sizeof kMagic);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = get_le<std::uint64_t>(bytes, sizeof kMagic + 4);
  if (header_len > bytes.size() - fixed) throw CheckpointError("checkpoint header is truncated");
  Checkpoint ck;
  std::size_t pos = fixed + header_len;
  try {
    const auto header = nlohmann::json::parse(bytes.substr(fixed, header_len));
    ck.config = header.at("config").get<RunConfig>();
    ck.kind = parse_kind(header.at("kind").get<std::string>());
    ck.step = header.at("step").get<std::int64_t>();
    ck.epoch = header.at("epoch").get<std::size_t>();
    ck.epoch_offset = header.at("epoch_offset").get<std::size_t>();
    ck.vocab = header.at("vocab").get<std::vector<std::string>>();
    auto read_group = [&](const char* key, std::vector<NamedArray>& group) {
      for (const auto& entry : header.at(key)) {
        NamedArray a;
        a.name = entry.at("name").get<std::string>();
        a.shape = entry.at("shape").get<Shape>();
        const std::size_t n = a.shape.empty() ? 0 : shape_numel(a.shape);
        if (n > (bytes.size() - pos) / 8) throw CheckpointError("checkpoint data is truncated at " + a.name);
        a.data.resize(n);
        for (std::size_t i = 0; i < n; ++i, pos += 8) {
          const auto bits = get_le<std::uint64_t>(bytes, pos);
          std::memcpy(&a.data[i], &bits, sizeof bits);
        }
        group.push_back(std::move(a));
      }
    };
    read_group("weights", ck.weights);
    read_group("adam_m", ck.adam_m);
    read_group("adam_v", ck.adam_v);
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& ex) {
    throw CheckpointError(std::string("checkpoint header does not parse: ") + ex.what());
  }
  if (pos != bytes.size()) throw CheckpointError("checkpoint has trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

bool checkpoint_roundtrip(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const Checkpoint ck = parse_checkpoint(bytes);
  Session s = Session::from_checkpoint(ck);
  return serialize_checkpoint(s.capture()) == bytes;
}

// ---------------------------------------------------------------------------
// Session

Session Session::create(const RunConfig& cfg, const Vocabulary& vocab) {
  Session s;
  s.cfg_ = cfg;
  s.cfg_.model.vocab_size = vocab.size();
  s.vocab_ = vocab;
  Rng rng(cfg.seed);
  if (cfg.kind == ModelKind::base) {
    s.base_ = std::make_unique<ReportModel>(ReportModel::init(s.cfg_.model, rng));
  } else {
    s.long_ = std::make_unique<LongitudinalModel>(LongitudinalModel::init(s.cfg_.model, rng));
  }
  s.adam_ = std::make_unique<Adam>(make_optimizer(s.parameters(), cfg.optimizer));
  return s;
}

LongitudinalModel& Session::longitudinal() {
  if (!long_) throw ContractError("session holds a base model, not a longitudinal one");
  return *long_;
}

std::vector<std::pair<std::string, Tensor>> Session::parameters() {
  return base_ ? named_parameters(*base_) : named_parameters(*long_);
}

Checkpoint Session::capture() const {
  Checkpoint ck;
  ck.config = cfg_;
  ck.kind = cfg_.kind;
  ck.step = step;
  ck.epoch = epoch;
  ck.epoch_offset = epoch_offset;
  ck.vocab = vocab_.tokens();
  for (const auto& slot : adam_->slots()) {
    const auto data = slot.param.data();
    ck.weights.push_back({slot.name, slot.param.shape(), {data.begin(), data.end()}});
    const bool has = !slot.moments.m.empty();
    ck.adam_m.push_back({slot.name, has ? slot.param.shape() : Shape{}, slot.moments.m});
    ck.adam_v.push_back({slot.name, has ? slot.param.shape() : Shape{}, slot.moments.v});
  }
  return ck;
}

Session Session::from_checkpoint(const Checkpoint& ck) {
  RunConfig cfg = ck.config;
  cfg.kind = ck.kind;
  Session s = create(cfg, Vocabulary::from_tokens(ck.vocab));
  auto& slots = s.adam_->slots();
  if (ck.weights.size() != slots.size() || ck.adam_m.size() != slots.size() || ck.adam_v.size() != slots.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(ck.weights.size()) + " tensors, model expects " +
                          std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& w = ck.weights[i];
    if (w.name != slots[i].name || w.shape != slots[i].param.shape()) {
      throw CheckpointError("checkpoint tensor " + w.name + " " + shape_str(w.shape) + " does not match model tensor " +
                            slots[i].name + " " + shape_str(slots[i].param.shape()));
    }
    for (const auto* m : {&ck.adam_m[i], &ck.adam_v[i]}) {
      if (m->name != w.name || !(m->data.empty() || m->data.size() == w.data.size())) {
        throw CheckpointError("optimizer state for " + w.name + " is inconsistent");
      }
    }
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    std::copy(ck.weights[i].data.begin(), ck.weights[i].data.end(), slots[i].param.mutable_data().begin());
    slots[i].moments.m = ck.adam_m[i].data;
    slots[i].moments.v = ck.adam_v[i].data;
  }
  s.adam_->set_steps_taken(ck.step);
  s.step = ck.step;
  s.epoch = ck.epoch;
  s.epoch_offset = ck.epoch_offset;
  return s;
}

// ---------------------------------------------------------------------------
// Data

std::vector<std::size_t> encode_target(const std::string& text, const Vocabulary& vocab, std::size_t max_tokens) {
  std::vector<std::size_t> ids = encode_report(text, vocab);
  // BOS, at most max_tokens tokens, the last of which is EOS.
  if (max_tokens >= 1 && ids.size() > max_tokens + 1) {
    ids.resize(max_tokens + 1);
    ids.back() = kEos;
  }
  return ids;
}

std::vector<Example> load_examples(const RunConfig& cfg, const std::filesystem::path& data) {
  std::vector<Example> out;
  if (cfg.kind == ModelKind::base) {
    for (auto& e : load_manifest(data)) {
      Example ex;
      ex.id = e.id;
      ex.volume = preprocess(e.volume, e.meta, cfg.preprocess);
      ex.findings = std::move(e.findings);
      out.push_back(std::move(ex));
    }
  } else {
    for (auto& p : load_pairs_manifest(data)) {
      Example ex;
      ex.id = pair_id(p);
      ex.volume = preprocess(p.new_visit.volume, p.new_visit.meta, cfg.preprocess);
      ex.findings = std::move(p.new_visit.findings);
      ex.prior_volume = preprocess(p.old_visit.volume, p.old_visit.meta, cfg.preprocess);
      ex.prior_findings = std::move(p.old_visit.findings);
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<std::string> training_corpus(const std::vector<Example>& examples, ModelKind kind) {
  std::vector<std::string> corpus;
  for (const auto& ex : examples) {
    corpus.push_back(ex.findings);
    if (kind == ModelKind::longitudinal) corpus.push_back(ex.prior_findings);
  }
  return corpus;
}

void encode_examples(std::vector<Example>& examples, const RunConfig& cfg, const Vocabulary& vocab) {
  for (auto& ex : examples) {
    ex.target = encode_target(ex.findings, vocab, cfg.max_tokens);
    if (cfg.kind != ModelKind::longitudinal) continue;
    if (cfg.zero_priors) {
      ex.prior_volume = Volume3D::filled(cfg.preprocess.target_shape, cfg.preprocess.target_spacing, 0.0,
                                         VolumeUnit::normalized);
      ex.prior_report = {kBos, kEos};
    } else {
      ex.prior_report = encode_target(ex.prior_findings, vocab, cfg.max_tokens);
    }
  }
}

double lr_scale_for_epoch(const RunConfig& cfg, std::size_t epoch) {
  if (cfg.lr_step_epochs == 0) return 1.0;
  return std::pow(cfg.lr_gamma, static_cast<double>(epoch / cfg.lr_step_epochs));
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng(seed).fork(0x5eed0000ULL + epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

double train_example(Session& s, const Example& ex) {
  const double scale = lr_scale_for_epoch(s.config(), s.epoch);
  if (s.kind() == ModelKind::base) return train_step(s.base(), s.optimizer(), ex.volume, ex.target, scale);
  return train_step_long(s.longitudinal(), s.optimizer(), ex.volume, ex.prior_volume, ex.prior_report, ex.target,
                         scale);
}

std::vector<std::size_t> generate_example(Session& s, const Example& ex, const DecodeOptions& opts) {
  if (s.kind() == ModelKind::base) return s.base().generate(ex.volume, opts);
  return s.longitudinal().generate_long(ex.volume, ex.prior_volume, ex.prior_report, opts);
}

// ---------------------------------------------------------------------------
// Drivers

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Keeps the header and rows with step <= last_step.
void truncate_loss_log(const std::filesystem::path& path, std::int64_t last_step) {
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (keep.empty() || std::stoll(line.substr(0, line.find(','))) <= last_step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

TrainResult run_train(const RunConfig& cfg_in, const std::filesystem::path& data, const std::filesystem::path& out_dir,
                      const std::optional<std::filesystem::path>& resume) {
  namespace fs = std::filesystem;
  std::optional<Session> session;
  RunConfig cfg = cfg_in;
  if (resume) {
    session.emplace(Session::from_checkpoint(load_checkpoint(*resume)));
    if (session->kind() != cfg_in.kind) {
      throw ContractError(std::string("resume: checkpoint is a ") + kind_name(session->kind()) + " model, run asks for " +
                          kind_name(cfg_in.kind));
    }
    session->set_limits(cfg_in.epochs, cfg_in.max_steps);
    cfg = session->config();
  }
  cfg.model.validate();
  std::vector<Example> examples = load_examples(cfg, data);
  if (examples.empty()) {
    throw ContractError(cfg.kind == ModelKind::longitudinal ? "longitudinal training needs at least one pair in " +
                                                                  data.string()
                                                            : "training manifest " + data.string() + " is empty");
  }
  if (!session) {
    const Vocabulary vocab = Vocabulary::build(training_corpus(examples, cfg.kind), cfg.vocab_min_count);
    session.emplace(Session::create(cfg, vocab));
  }
  Session& s = *session;
  encode_examples(examples, s.config(), s.vocab());

  fs::create_directories(out_dir);
  TrainResult result;
  result.checkpoint = out_dir / "checkpoint.ckpt";
  result.loss_log = out_dir / "loss.csv";
  if (resume && fs::exists(result.loss_log)) {
    truncate_loss_log(result.loss_log, s.step);
  } else {
    std::ofstream(result.loss_log, std::ios::trunc) << "step,epoch,id,loss\n";
  }
  std::ofstream log(result.loss_log, std::ios::app);

  const std::size_t n = examples.size();
  auto step_limit_hit = [&] { return cfg.max_steps != 0 && s.step >= static_cast<std::int64_t>(cfg.max_steps); };
  double epoch_sum = 0.0;
  std::size_t epoch_count = 0;
  while (s.epoch < cfg.epochs && !step_limit_hit()) {
    const auto order = epoch_order(cfg.seed, s.epoch, n);
    while (s.epoch_offset < n && !step_limit_hit()) {
      const Example& ex = examples[order[s.epoch_offset]];
      const double loss = train_example(s, ex);
      ++s.step;
      ++s.epoch_offset;
      epoch_sum += loss;
      ++epoch_count;
      result.losses.push_back(loss);
      log << s.step << ',' << s.epoch << ',' << ex.id << ',' << format_double(loss) << '\n';
    }
    if (s.epoch_offset == n) {
      if (epoch_count == n) result.final_epoch_loss = epoch_sum / static_cast<double>(n);
      epoch_sum = 0.0;
      epoch_count = 0;
      s.epoch_offset = 0;
      ++s.epoch;
      if (cfg.checkpoint_every_epochs != 0 && s.epoch % cfg.checkpoint_every_epochs == 0) {
        save_checkpoint(result.checkpoint, s.capture());
      }
    }
  }
  log.flush();
  save_checkpoint(result.checkpoint, s.capture());
  result.steps = s.step;
  return result;
}

std::vector<GeneratedReport> run_generate(const std::filesystem::path& checkpoint, const std::filesystem::path& data,
                                          ModelKind mode, const std::filesystem::path& out_file,
                                          std::optional<DecodeMode> decode) {
  Session s = Session::from_checkpoint(load_checkpoint(checkpoint));
  if (s.kind() != mode) {
    throw ContractError(std::string("generate: checkpoint holds a ") + kind_name(s.kind()) + " model but mode is " +
                        kind_name(mode));
  }
  std::vector<Example> examples = load_examples(s.config(), data);
  encode_examples(examples, s.config(), s.vocab());
  DecodeOptions opts;
  opts.mode = decode.value_or(s.config().decode_mode);
  opts.beam_size = s.config().beam_size;
  opts.max_tokens = s.config().max_tokens;
  std::vector<GeneratedReport> out;
  std::ofstream file(out_file, std::ios::trunc);
  if (!file) throw ContractError("cannot write " + out_file.string());
  for (const auto& ex : examples) {
    GeneratedReport r;
    r.id = ex.id;
    r.tokens = generate_example(s, ex, opts);
    r.report = decode_tokens(r.tokens, s.vocab());
    file << nlohmann::json{{"id", r.id}, {"report", r.report}}.dump() << '\n';
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

std::map<std::string, std::string> read_reports(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto row = nlohmann::json::parse(line);
      std::string id;
      if (row.contains("new") && row.contains("old")) {
        auto visit_id = [](const nlohmann::json& v) {
          return v.contains("id") ? v.at("id").get<std::string>() : v.at("payload").get<std::string>();
        };
        id = pair_id(visit_id(row.at("old")), visit_id(row.at("new")));
        row = row.at("new");
      } else {
        id = row.contains("id") ? row.at("id").get<std::string>() : row.at("payload").get<std::string>();
      }
      const std::string text =
          row.contains("report") ? row.at("report").get<std::string>() : row.at("findings").get<std::string>();
      if (!out.emplace(id, text).second) throw ContractError("duplicate id " + id);
    } catch (const ContractError&) {
      throw;
    } catch (const std::exception& ex) {
      throw ContractError(path.filename().string() + " row " + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return out;
}

}  // namespace

MetricReport run_eval(const std::filesystem::path& predictions, const std::filesystem::path& truth) {
  const auto pred = read_reports(predictions);
  const auto ref = read_reports(truth);
  std::vector<std::string> missing_pred, missing_truth;
  for (const auto& [id, _] : ref)
    if (!pred.count(id)) missing_pred.push_back(id);
  for (const auto& [id, _] : pred)
    if (!ref.count(id)) missing_truth.push_back(id);
  if (!missing_pred.empty() || !missing_truth.empty()) {
    std::ostringstream msg;
    msg << "eval: ids do not align;";
    if (!missing_pred.empty()) {
      msg << " missing from predictions:";
      for (const auto& id : missing_pred) msg << ' ' << id;
      msg << ';';
    }
    if (!missing_truth.empty()) {
      msg << " missing from references:";
      for (const auto& id : missing_truth) msg << ' ' << id;
    }
    throw ContractError(msg.str());
  }
  std::vector<std::string> p, t;
  for (const auto& [id, text] : ref) {
    p.push_back(pred.at(id));
    t.push_back(text);
  }
  return evaluate_reports(p, t);
}

}  // namespace ct2rep
