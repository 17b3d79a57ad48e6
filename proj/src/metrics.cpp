#include "ct2rep/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "ct2rep/tensor.hpp"
#include "ct2rep/text.hpp"

namespace ct2rep {

const std::array<std::string_view, kNumLabels>& label_names() {
  static const std::array<std::string_view, kNumLabels> names = {
      "medical material",
      "arterial wall calcification",
      "cardiomegaly",
      "pericardial effusion",
      "coronary artery wall calcification",
      "hiatal hernia",
      "lymphadenopathy",
      "emphysema",
      "atelectasis",
      "lung nodule",
      "lung opacity",
      "pulmonary fibrotic sequela",
      "pleural effusion",
      "mosaic attenuation pattern",
      "peribronchial thickening",
      "consolidation",
      "bronchiectasis",
      "interlobular septal thickening",
  };
  return names;
}

// ---------------------------------------------------------------------------
// BLEU

namespace {

struct NgramStats {
  std::array<std::size_t, 4> clipped{};
  std::array<std::size_t, 4> cand_total{};
  std::array<std::size_t, 4> ref_total{};
  std::size_t cand_len = 0;
  std::size_t ref_len = 0;
};

void check_order(int n) {
  if (n < 1 || n > 4) throw ContractError("bleu: n must be in 1..4, got " + std::to_string(n));
}

std::map<Tokens, std::size_t> ngram_counts(const Tokens& t, std::size_t k) {
  std::map<Tokens, std::size_t> counts;
  for (std::size_t i = 0; i + k <= t.size(); ++i) ++counts[Tokens(t.begin() + i, t.begin() + i + k)];
  return counts;
}

NgramStats ngram_stats(const Tokens& cand, const Tokens& ref, int n) {
  NgramStats s;
  s.cand_len = cand.size();
  s.ref_len = ref.size();
  for (int k = 1; k <= n; ++k) {
    const auto c = ngram_counts(cand, k);
    const auto r = ngram_counts(ref, k);
    for (const auto& [gram, count] : c) {
      const auto it = r.find(gram);
      if (it != r.end()) s.clipped[k - 1] += std::min(count, it->second);
      s.cand_total[k - 1] += count;
    }
    for (const auto& [gram, count] : r) s.ref_total[k - 1] += count;
  }
  return s;
}

double bleu_from_stats(const NgramStats& s, int n) {
  if (s.cand_len == 0) return 0.0;
  double log_sum = 0.0;
  int orders = 0;
  for (int k = 0; k < n; ++k) {
    if (s.cand_total[k] == 0 && s.ref_total[k] == 0) continue;
    if (s.clipped[k] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(s.clipped[k]) / static_cast<double>(s.cand_total[k]));
    ++orders;
  }
  const double c = static_cast<double>(s.cand_len);
  const double r = static_cast<double>(s.ref_len);
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return orders == 0 ? bp : bp * std::exp(log_sum / orders);
}

}  // namespace

double bleu(const Tokens& candidate, const Tokens& reference, int n) {
  check_order(n);
  return bleu_from_stats(ngram_stats(candidate, reference, n), n);
}

double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, int n) {
  check_order(n);
  if (candidates.size() != references.size()) throw ContractError("corpus_bleu: candidate/reference count mismatch");
  NgramStats total;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const NgramStats s = ngram_stats(candidates[i], references[i], n);
    for (int k = 0; k < 4; ++k) {
      total.clipped[k] += s.clipped[k];
      total.cand_total[k] += s.cand_total[k];
      total.ref_total[k] += s.ref_total[k];
    }
    total.cand_len += s.cand_len;
    total.ref_len += s.ref_len;
  }
  return bleu_from_stats(total, n);
}

// ---------------------------------------------------------------------------
// ROUGE-L

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& candidate, const Tokens& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

// ---------------------------------------------------------------------------
// METEOR-lite

std::string stem(const std::string& word) {
  auto ends_with = [&](std::string_view suffix) {
    return word.size() >= suffix.size() && word.compare(word.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  auto strip = [&](std::size_t n, std::string_view add, std::string& out) {
    if (word.size() - n < 3) return false;
    out = word.substr(0, word.size() - n) + std::string(add);
    return true;
  };
  std::string out;
  if (ends_with("sses") && strip(2, "", out)) return out;
  if (ends_with("ies") && strip(3, "y", out)) return out;
  for (std::string_view s : {"ches", "shes", "ses", "xes", "zes"}) {
    if (ends_with(s) && strip(2, "", out)) return out;
  }
  if (ends_with("ing") && strip(3, "", out)) return out;
  if (ends_with("ed") && strip(2, "", out)) return out;
  if (ends_with("s") && !ends_with("ss") && strip(1, "", out)) return out;
  return word;
}

namespace {

using Matcher = bool (*)(const std::string&, const std::string&);

bool exact_match(const std::string& a, const std::string& b) { return a == b; }
bool stem_match(const std::string& a, const std::string& b) { return stem(a) == stem(b); }

// One alignment stage: each unaligned candidate word, left to right, takes
// the unaligned reference word that continues the previous chunk, otherwise
// the one starting the longest run of further matches, otherwise the
// earliest.
void align_stage(const Tokens& c, const Tokens& r, Matcher match, std::vector<long>& c2r, std::vector<bool>& r_used) {
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c2r[i] >= 0) continue;
    long best = -1;
    std::size_t best_run = 0;
    if (i > 0 && c2r[i - 1] >= 0) {
      const std::size_t j = static_cast<std::size_t>(c2r[i - 1]) + 1;
      if (j < r.size() && !r_used[j] && match(c[i], r[j])) best = static_cast<long>(j);
    }
    if (best < 0) {
      for (std::size_t j = 0; j < r.size(); ++j) {
        if (r_used[j] || !match(c[i], r[j])) continue;
        std::size_t run = 1;
        while (i + run < c.size() && j + run < r.size() && c2r[i + run] < 0 && !r_used[j + run] &&
               match(c[i + run], r[j + run]))
          ++run;
        if (best < 0 || run > best_run) {
          best = static_cast<long>(j);
          best_run = run;
        }
      }
    }
    if (best >= 0) {
      c2r[i] = best;
      r_used[static_cast<std::size_t>(best)] = true;
    }
  }
}

}  // namespace

MeteorDetail meteor_detail(const Tokens& candidate, const Tokens& reference) {
  MeteorDetail d;
  if (candidate.empty() || reference.empty()) return d;
  std::vector<long> c2r(candidate.size(), -1);
  std::vector<bool> r_used(reference.size(), false);
  align_stage(candidate, reference, exact_match, c2r, r_used);
  align_stage(candidate, reference, stem_match, c2r, r_used);
  long prev_i = -2, prev_j = -2;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    if (c2r[i] < 0) continue;
    ++d.matches;
    if (!(static_cast<long>(i) == prev_i + 1 && c2r[i] == prev_j + 1)) ++d.chunks;
    prev_i = static_cast<long>(i);
    prev_j = c2r[i];
  }
  if (d.matches == 0) return d;
  const double m = static_cast<double>(d.matches);
  d.precision = m / static_cast<double>(candidate.size());
  d.recall = m / static_cast<double>(reference.size());
  d.fmean = 10.0 * d.precision * d.recall / (d.recall + 9.0 * d.precision);
  d.penalty = 0.5 * std::pow(static_cast<double>(d.chunks) / m, 3.0);
  d.score = d.fmean * (1.0 - d.penalty);
  return d;
}

double meteor_lite(const Tokens& candidate, const Tokens& reference) {
  return meteor_detail(candidate, reference).score;
}

// ---------------------------------------------------------------------------
// Labeler

const std::string& builtin_label_rules() {
  static const std::string rules = R"json({
  "negation": ["no", "not", "without", "absence of", "negative for", "free of"],
  "labels": {
    "medical material": ["medical material", "catheter", "pacemaker", "surgical clip", "sternotomy wire", "port device"],
    "arterial wall calcification": ["arterial wall calcification", "aortic calcification", "calcification of the aorta", "atherosclerotic plaque", "calcified atherosclerotic"],
    "cardiomegaly": ["cardiomegaly", "heart size ... increased", "heart size ... enlarged", "enlarged heart", "heart is enlarged"],
    "pericardial effusion": ["pericardial effusion", "pericardial fluid"],
    "coronary artery wall calcification": ["coronary artery wall calcification", "coronary artery calcification", "coronary calcification", "calcified coronary"],
    "hiatal hernia": ["hiatal hernia", "hiatus hernia"],
    "lymphadenopathy": ["lymphadenopathy", "enlarged lymph node", "lymph node ... enlarged", "lymph node ... pathological size"],
    "emphysema": ["emphysema", "emphysematous"],
    "atelectasis": ["atelectasis", "atelectatic"],
    "lung nodule": ["nodule"],
    "lung opacity": ["opacity", "ground-glass", "ground glass"],
    "pulmonary fibrotic sequela": ["fibrotic sequela", "fibrotic sequelae", "fibrotic change", "fibrotic band", "fibrosis"],
    "pleural effusion": ["pleural effusion", "pleural fluid"],
    "mosaic attenuation pattern": ["mosaic attenuation", "mosaic pattern"],
    "peribronchial thickening": ["peribronchial thickening", "peribronchial wall thickening", "bronchial wall thickening"],
    "consolidation": ["consolidation", "consolidated"],
    "bronchiectasis": ["bronchiectasis", "bronchiectatic"],
    "interlobular septal thickening": ["interlobular septal thickening", "septal thickening"]
  }
}
)json";
  return rules;
}

namespace {

Tokens stem_tokens(const Tokens& t) {
  Tokens out;
  out.reserve(t.size());
  for (const auto& w : t) out.push_back(stem(w));
  return out;
}

std::vector<Tokens> parse_phrase(const std::string& phrase) {
  std::vector<Tokens> segments;
  std::size_t start = 0;
  while (true) {
    const std::size_t gap = phrase.find("...", start);
    Tokens seg = stem_tokens(tokenize(phrase.substr(start, gap == std::string::npos ? std::string::npos : gap - start)));
    if (!seg.empty()) segments.push_back(std::move(seg));
    if (gap == std::string::npos) break;
    start = gap + 3;
  }
  if (segments.empty()) throw ContractError("labeler: empty phrase");
  return segments;
}

// Position just past the first occurrence of seg at or after `from`, or npos.
std::size_t find_segment(const Tokens& sentence, const Tokens& seg, std::size_t from) {
  if (seg.size() > sentence.size()) return std::string::npos;
  for (std::size_t i = from; i + seg.size() <= sentence.size(); ++i) {
    if (std::equal(seg.begin(), seg.end(), sentence.begin() + i)) return i + seg.size();
  }
  return std::string::npos;
}

bool phrase_in(const Tokens& sentence, const std::vector<Tokens>& segments) {
  std::size_t pos = 0;
  for (const auto& seg : segments) {
    pos = find_segment(sentence, seg, pos);
    if (pos == std::string::npos) return false;
  }
  return true;
}

}  // namespace

Labeler Labeler::from_json(const nlohmann::json& rules) {
  Labeler l;
  std::vector<Tokens> negation;
  for (const auto& cue : rules.at("negation")) negation.push_back(tokenize(cue.get<std::string>()));
  const auto& labels = rules.at("labels");
  for (std::size_t k = 0; k < kNumLabels; ++k) {
    const std::string name(label_names()[k]);
    if (!labels.contains(name)) throw ContractError("labeler rules: missing label '" + name + "'");
    const auto& entry = labels.at(name);
    Rule rule;
    // Either a list of phrases or {"include": [...], "negation": [...]}.
    const auto& include = entry.is_array() ? entry : entry.at("include");
    for (const auto& p : include) rule.include.push_back(parse_phrase(p.get<std::string>()));
    rule.negation = negation;
    if (entry.is_object() && entry.contains("negation")) {
      rule.negation.clear();
      for (const auto& cue : entry.at("negation")) rule.negation.push_back(tokenize(cue.get<std::string>()));
    }
    l.rules_[k] = std::move(rule);
  }
  if (labels.size() != kNumLabels) throw ContractError("labeler rules: expected exactly 18 labels");
  return l;
}

const Labeler& Labeler::builtin() {
  static const Labeler labeler = from_json(nlohmann::json::parse(builtin_label_rules()));
  return labeler;
}

LabelVector Labeler::extract(const std::string& report) const {
  // Phrases match stemmed words; negation cues match the words as written,
  // so "noted" is not read as "not".
  std::vector<Tokens> sentences(1), stemmed(1);
  for (const auto& tok : tokenize(report)) {
    if (tok == ".") {
      if (!sentences.back().empty()) {
        sentences.emplace_back();
        stemmed.emplace_back();
      }
    } else {
      sentences.back().push_back(tok);
      stemmed.back().push_back(stem(tok));
    }
  }
  LabelVector out{};
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const Tokens& s = stemmed[i];
    if (s.empty()) continue;
    for (std::size_t k = 0; k < kNumLabels; ++k) {
      if (out[k]) continue;
      const Rule& rule = rules_[k];
      const bool hit = std::any_of(rule.include.begin(), rule.include.end(),
                                   [&](const auto& phrase) { return phrase_in(s, phrase); });
      if (!hit) continue;
      const bool negated = std::any_of(rule.negation.begin(), rule.negation.end(),
                                       [&](const Tokens& cue) { return find_segment(sentences[i], cue, 0) != std::string::npos; });
      if (!negated) out[k] = true;
    }
  }
  return out;
}

LabelVector extract_labels(const std::string& report) { return Labeler::builtin().extract(report); }

// ---------------------------------------------------------------------------
// Clinical efficacy

namespace {

void finish_score(LabelScore& s) {
  s.precision = s.tp + s.fp == 0 ? 0.0 : static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp);
  s.recall = s.tp + s.fn == 0 ? 0.0 : static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn);
  s.f1 = s.precision + s.recall == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
}

}  // namespace

ClinicalEfficacy clinical_efficacy_labels(const std::vector<LabelVector>& predicted,
                                          const std::vector<LabelVector>& truth) {
  if (predicted.size() != truth.size()) {
    throw ContractError("clinical_efficacy: " + std::to_string(predicted.size()) + " predictions vs " +
                        std::to_string(truth.size()) + " references");
  }
  ClinicalEfficacy ce;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    for (std::size_t k = 0; k < kNumLabels; ++k) {
      auto& s = ce.per_label[k];
      if (predicted[i][k] && truth[i][k]) ++s.tp;
      if (predicted[i][k] && !truth[i][k]) ++s.fp;
      if (!predicted[i][k] && truth[i][k]) ++s.fn;
    }
  }
  for (auto& s : ce.per_label) {
    finish_score(s);
    ce.mean.tp += s.tp;
    ce.mean.fp += s.fp;
    ce.mean.fn += s.fn;
    ce.mean.precision += s.precision / kNumLabels;
    ce.mean.recall += s.recall / kNumLabels;
    ce.mean.f1 += s.f1 / kNumLabels;
  }
  return ce;
}

ClinicalEfficacy clinical_efficacy(const std::vector<std::string>& predicted, const std::vector<std::string>& truth) {
  if (predicted.size() != truth.size()) {
    throw ContractError("clinical_efficacy: " + std::to_string(predicted.size()) + " predictions vs " +
                        std::to_string(truth.size()) + " references");
  }
  std::vector<LabelVector> p, t;
  for (const auto& r : predicted) p.push_back(extract_labels(r));
  for (const auto& r : truth) t.push_back(extract_labels(r));
  return clinical_efficacy_labels(p, t);
}

MetricReport evaluate_reports(const std::vector<std::string>& predicted, const std::vector<std::string>& truth) {
  if (predicted.size() != truth.size()) throw ContractError("evaluate: prediction/reference count mismatch");
  MetricReport r;
  std::vector<Tokens> cand, ref;
  for (const auto& s : predicted) cand.push_back(tokenize(s));
  for (const auto& s : truth) ref.push_back(tokenize(s));
  for (int n = 1; n <= 4; ++n) r.bleu[n - 1] = corpus_bleu(cand, ref, n);
  if (!cand.empty()) {
    const double count = static_cast<double>(cand.size());
    for (std::size_t i = 0; i < cand.size(); ++i) {
      for (int n = 1; n <= 4; ++n) r.sentence_bleu[n - 1] += bleu(cand[i], ref[i], n) / count;
      r.meteor += meteor_lite(cand[i], ref[i]) / count;
      r.rouge_l += rouge_l(cand[i], ref[i]) / count;
    }
  }
  r.ce = clinical_efficacy(predicted, truth);
  r.precision = r.ce.mean.precision;
  r.recall = r.ce.mean.recall;
  r.f1 = r.ce.mean.f1;
  return r;
}

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json labels = nlohmann::json::array();
  for (std::size_t k = 0; k < kNumLabels; ++k) {
    const auto& s = r.ce.per_label[k];
    labels.push_back({{"label", std::string(label_names()[k])},
                      {"tp", s.tp},
                      {"fp", s.fp},
                      {"fn", s.fn},
                      {"precision", s.precision},
                      {"recall", s.recall},
                      {"f1", s.f1}});
  }
  return {{"bleu1", r.bleu[0]},
          {"bleu2", r.bleu[1]},
          {"bleu3", r.bleu[2]},
          {"bleu4", r.bleu[3]},
          {"sentence_bleu", r.sentence_bleu},
          {"meteor_lite", r.meteor},
          {"rouge_l", r.rouge_l},
          {"precision", r.precision},
          {"recall", r.recall},
          {"f1", r.f1},
          {"clinical_efficacy", labels}};
}

std::string format_table(const MetricReport& r) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "BLEU-1 %.4f  BLEU-2 %.4f  BLEU-3 %.4f  BLEU-4 %.4f  METEOR-lite %.4f  ROUGE-L %.4f\n",
                r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.meteor, r.rouge_l);
  out << line;
  std::snprintf(line, sizeof line, "%-36s %9s %9s %9s\n", "abnormality", "precision", "recall", "f1");
  out << line;
  for (std::size_t k = 0; k < kNumLabels; ++k) {
    const auto& s = r.ce.per_label[k];
    std::snprintf(line, sizeof line, "%-36s %9.4f %9.4f %9.4f\n", std::string(label_names()[k]).c_str(), s.precision,
                  s.recall, s.f1);
    out << line;
  }
  std::snprintf(line, sizeof line, "%-36s %9.4f %9.4f %9.4f\n", "mean", r.precision, r.recall, r.f1);
  out << line;
  return out.str();
}

}  // namespace ct2rep
