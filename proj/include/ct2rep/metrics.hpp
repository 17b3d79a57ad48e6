#pragma once

// Text-generation metrics (BLEU, ROUGE-L, METEOR-lite) and clinical
// efficacy scored with a rule-based 18-abnormality labeler.

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace ct2rep {

using Tokens = std::vector<std::string>;

inline constexpr std::size_t kNumLabels = 18;
using LabelVector = std::array<bool, kNumLabels>;

const std::array<std::string_view, kNumLabels>& label_names();

// Sentence BLEU-n with uniform weights and brevity penalty. Orders for which
// neither side has any n-gram are skipped, so identical short sentences
// still score 1.
double bleu(const Tokens& candidate, const Tokens& reference, int n);
// Corpus BLEU-n from summed clipped counts and summed lengths.
double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, int n);

std::size_t lcs_length(const Tokens& a, const Tokens& b);
double rouge_l(const Tokens& candidate, const Tokens& reference);

// Suffix-strip stemmer: sses->ss, ies->y, (s|x|z|ch|sh)es, ing, ed, s.
// A rule only fires when at least three characters remain.
std::string stem(const std::string& word);

struct MeteorDetail {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  double precision = 0.0;
  double recall = 0.0;
  double fmean = 0.0;
  double penalty = 0.0;
  double score = 0.0;
};

MeteorDetail meteor_detail(const Tokens& candidate, const Tokens& reference);
double meteor_lite(const Tokens& candidate, const Tokens& reference);

// Phrase rules per label. A phrase is a token sequence where "..." matches
// any gap inside the sentence; phrases and text are compared after
// stemming. A sentence containing a negation cue (matched unstemmed)
// contributes nothing.
class Labeler {
 public:
  struct Rule {
    std::vector<std::vector<Tokens>> include;  // phrases split at "..."
    std::vector<Tokens> negation;
  };

  static Labeler from_json(const nlohmann::json& rules);
  static const Labeler& builtin();

  LabelVector extract(const std::string& report) const;

 private:
  std::array<Rule, kNumLabels> rules_;
};

// Rules used by extract_labels; identical to data/labeler_rules.json.
const std::string& builtin_label_rules();
LabelVector extract_labels(const std::string& report);

struct LabelScore {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct ClinicalEfficacy {
  std::array<LabelScore, kNumLabels> per_label;
  LabelScore mean;  // macro average over all 18 labels (counts are totals)
};

ClinicalEfficacy clinical_efficacy_labels(const std::vector<LabelVector>& predicted,
                                          const std::vector<LabelVector>& truth);
ClinicalEfficacy clinical_efficacy(const std::vector<std::string>& predicted, const std::vector<std::string>& truth);

struct MetricReport {
  std::array<double, 4> bleu{};           // corpus BLEU-1..4
  std::array<double, 4> sentence_bleu{};  // mean sentence BLEU-1..4
  double meteor = 0.0;                    // METEOR-lite, sentence mean
  double rouge_l = 0.0;                   // sentence mean
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  ClinicalEfficacy ce;
};

MetricReport evaluate_reports(const std::vector<std::string>& predicted, const std::vector<std::string>& truth);
nlohmann::json to_json(const MetricReport& r);
// Plain-text table: NLG metrics, then one CE row per label and a mean row.
std::string format_table(const MetricReport& r);

}  // namespace ct2rep
