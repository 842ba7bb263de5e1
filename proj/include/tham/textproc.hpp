// Word-level tokenization, vocabulary, NLG overlap metrics, and the
// hallucination diagnostics report.
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "tham/rng.hpp"

namespace tham {

using TokenSeq = std::vector<std::string>;

// Lowercases and splits on whitespace; punctuation characters become their
// own tokens ("does he sit?" -> [does, he, sit, ?]).
inline TokenSeq tokenize(const std::string& text) {
  TokenSeq out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c) || c == '_' || c == '-' || c == '\'') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      out.push_back(std::string(1, static_cast<char>(c)));
    }
  }
  flush();
  return out;
}

inline std::string detokenize(const TokenSeq& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kSep = 4;

  Vocabulary() { add_reserved(); }

  // Frequency-descending then lexicographic ordering over all corpus tokens.
  static Vocabulary build(const std::vector<TokenSeq>& corpus) {
    if (corpus.empty()) throw std::invalid_argument("Vocabulary::build: empty corpus");
    std::map<std::string, std::int64_t> freq;
    for (const auto& seq : corpus)
      for (const auto& tok : seq) ++freq[tok];
    std::vector<std::pair<std::string, std::int64_t>> items(freq.begin(), freq.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [tok, n] : items) v.add(tok);
    return v;
  }

  int add(const std::string& tok) {
    auto it = ids_.find(tok);
    if (it != ids_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(tok);
    ids_.emplace(tok, id);
    return id;
  }

  int encode_token(const std::string& tok) const {
    auto it = ids_.find(tok);
    return it == ids_.end() ? kUnk : it->second;
  }

  std::vector<int> encode(const TokenSeq& seq) const {
    std::vector<int> out;
    out.reserve(seq.size());
    for (const auto& t : seq) out.push_back(encode_token(t));
    return out;
  }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("Vocabulary::token: id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  const std::vector<std::string>& tokens() const { return tokens_; }

  // Content hash used to pair checkpoints with the corpus they were built on.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tokens_) {
      h = fnv1a64(t, h);
      h = fnv1a64("\x1f", h);
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
  }

  static Vocabulary from_tokens(const std::vector<std::string>& toks) {
    Vocabulary v;
    if (toks.size() < 5) throw std::invalid_argument("Vocabulary::from_tokens: missing reserved tokens");
    for (std::size_t i = 5; i < toks.size(); ++i) v.add(toks[i]);
    return v;
  }

 private:
  void add_reserved() {
    add("<pad>");
    add("<bos>");
    add("<eos>");
    add("<unk>");
    add("<sep>");
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

namespace detail {

inline std::map<TokenSeq, int> ngram_counts(const TokenSeq& seq, int n) {
  std::map<TokenSeq, int> counts;
  if (static_cast<int>(seq.size()) < n) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i)
    ++counts[TokenSeq(seq.begin() + static_cast<std::ptrdiff_t>(i),
                      seq.begin() + static_cast<std::ptrdiff_t>(i + static_cast<std::size_t>(n)))];
  return counts;
}

}  // namespace detail

// Clipped n-gram precision BLEU with brevity penalty. Zero counts are
// smoothed with epsilon = 1e-9. The brevity penalty uses the shortest
// reference length, which keeps multi-reference scores monotone in the
// reference set.
inline double bleu(const TokenSeq& candidate, const std::vector<TokenSeq>& references, int max_n = 4) {
  if (max_n < 1 || max_n > 4) throw std::invalid_argument("bleu: max_n must be in 1..4");
  if (references.empty()) throw std::invalid_argument("bleu: references must be non-empty");
  if (candidate.empty()) return 0.0;

  constexpr double kEps = 1e-9;
  const auto c = static_cast<double>(candidate.size());

  double log_prec_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const auto cand_counts = detail::ngram_counts(candidate, n);
    double total = 0.0, clipped = 0.0;
    for (const auto& [gram, cnt] : cand_counts) total += cnt;
    for (const auto& [gram, cnt] : cand_counts) {
      int best = 0;
      for (const auto& ref : references) {
        const auto rc = detail::ngram_counts(ref, n);
        auto it = rc.find(gram);
        if (it != rc.end()) best = std::max(best, it->second);
      }
      clipped += std::min(cnt, best);
    }
    const double p = total > 0.0 ? std::max(clipped, kEps) / total : kEps;
    log_prec_sum += std::log(p);
  }

  std::size_t r = references[0].size();
  for (const auto& ref : references) r = std::min(r, ref.size());
  const double bp = c >= static_cast<double>(r) ? 1.0 : std::exp(1.0 - static_cast<double>(r) / c);
  return bp * std::exp(log_prec_sum / static_cast<double>(max_n));
}

namespace detail {

inline std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      if (a[i - 1] == b[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

}  // namespace detail

// LCS F-measure with beta = 1.2 (coco-caption convention), max over references.
inline double rouge_l(const TokenSeq& candidate, const std::vector<TokenSeq>& references) {
  if (references.empty()) throw std::invalid_argument("rouge_l: references must be non-empty");
  if (candidate.empty()) return 0.0;
  constexpr double beta = 1.2;
  double best = 0.0;
  for (const auto& ref : references) {
    if (ref.empty()) continue;
    const auto lcs = static_cast<double>(detail::lcs_length(candidate, ref));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(candidate.size());
    const double r = lcs / static_cast<double>(ref.size());
    const double f = (1.0 + beta * beta) * p * r / (r + beta * beta * p);
    best = std::max(best, f);
  }
  return best;
}

// True when candidate shares at least one n-gram (default n = 3) with any of
// the given texts.
inline bool shares_ngram(const TokenSeq& candidate, const std::vector<TokenSeq>& texts, int n = 3) {
  if (static_cast<int>(candidate.size()) < n) return false;
  const auto cand = detail::ngram_counts(candidate, n);
  for (const auto& text : texts) {
    const auto tc = detail::ngram_counts(text, n);
    for (const auto& [gram, cnt] : cand)
      if (tc.count(gram)) return true;
  }
  return false;
}

// Per-source similarity means for Fig.-2-style diagnostics. BLEU-1 and
// BLEU-4 are both reported since the paper does not name the order used.
struct SourceSimilarity {
  double pred_b1 = 0.0;
  double pred_b4 = 0.0;
  double gt_b1 = 0.0;
  double gt_b4 = 0.0;
  std::int64_t count = 0;  // items that actually had this source
};

struct HallucinationReport {
  SourceSimilarity caption, history, question;            // all items
  SourceSimilarity caption_inc, history_inc, question_inc;  // incorrect subset
  double copy_rate = 0.0;
  std::int64_t n_items = 0;
  std::int64_t n_incorrect = 0;
  double threshold = 0.1;

  nlohmann::json to_json() const {
    auto src = [](const SourceSimilarity& s) {
      return nlohmann::json{{"pred_bleu1", s.pred_b1},
                            {"pred_bleu4", s.pred_b4},
                            {"gt_bleu1", s.gt_b1},
                            {"gt_bleu4", s.gt_b4},
                            {"count", s.count}};
    };
    return nlohmann::json{{"all", {{"caption", src(caption)}, {"history", src(history)}, {"question", src(question)}}},
                          {"incorrect",
                           {{"caption", src(caption_inc)}, {"history", src(history_inc)}, {"question", src(question_inc)}}},
                          {"copy_rate", copy_rate},
                          {"n_items", n_items},
                          {"n_incorrect", n_incorrect},
                          {"threshold", threshold}};
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "subset,source,pred_bleu1,pred_bleu4,gt_bleu1,gt_bleu4,count\n";
    auto row = [&](const char* subset, const char* name, const SourceSimilarity& s) {
      os << subset << ',' << name << ',' << s.pred_b1 << ',' << s.pred_b4 << ',' << s.gt_b1 << ','
         << s.gt_b4 << ',' << s.count << '\n';
    };
    row("all", "caption", caption);
    row("all", "history", history);
    row("all", "question", question);
    row("incorrect", "caption", caption_inc);
    row("incorrect", "history", history_inc);
    row("incorrect", "question", question_inc);
    os << "copy_rate,," << copy_rate << ",,,," << n_items << '\n';
    return os.str();
  }
};

// One diagnostic item: a prediction aligned with the inputs it could have
// copied from and the reference answers it is scored against.
struct DiagnosticItem {
  TokenSeq prediction;
  std::vector<TokenSeq> ground_truths;  // at least one
  TokenSeq caption;
  std::vector<TokenSeq> history;  // previous-round utterances, may be empty
  TokenSeq question;
};

inline HallucinationReport hallucination_report(const std::vector<DiagnosticItem>& items,
                                                double threshold = 0.1) {
  HallucinationReport rep;
  rep.threshold = threshold;
  rep.n_items = static_cast<std::int64_t>(items.size());

  auto accumulate = [](SourceSimilarity& s, const TokenSeq& pred, const std::vector<TokenSeq>& gts,
                       const std::vector<TokenSeq>& source_refs) {
    if (source_refs.empty()) return;
    bool all_empty = true;
    for (const auto& r : source_refs) all_empty = all_empty && r.empty();
    if (all_empty) return;
    s.pred_b1 += bleu(pred, source_refs, 1);
    s.pred_b4 += bleu(pred, source_refs, 4);
    double g1 = 0.0, g4 = 0.0;
    for (const auto& gt : gts) {
      g1 = std::max(g1, bleu(gt, source_refs, 1));
      g4 = std::max(g4, bleu(gt, source_refs, 4));
    }
    s.gt_b1 += g1;
    s.gt_b4 += g4;
    ++s.count;
  };

  std::int64_t copies = 0;
  for (const auto& it : items) {
    if (it.ground_truths.empty()) throw std::invalid_argument("hallucination_report: item without ground truth");
    accumulate(rep.caption, it.prediction, it.ground_truths, {it.caption});
    accumulate(rep.history, it.prediction, it.ground_truths, it.history);
    accumulate(rep.question, it.prediction, it.ground_truths, {it.question});

    std::vector<TokenSeq> inputs = it.history;
    inputs.push_back(it.caption);
    inputs.push_back(it.question);
    if (shares_ngram(it.prediction, inputs)) ++copies;

    const double b4 = bleu(it.prediction, it.ground_truths, 4);
    if (b4 < threshold) {
      ++rep.n_incorrect;
      accumulate(rep.caption_inc, it.prediction, it.ground_truths, {it.caption});
      accumulate(rep.history_inc, it.prediction, it.ground_truths, it.history);
      accumulate(rep.question_inc, it.prediction, it.ground_truths, {it.question});
    }
  }

  auto finalize = [](SourceSimilarity& s) {
    if (s.count == 0) return;
    const auto n = static_cast<double>(s.count);
    s.pred_b1 /= n;
    s.pred_b4 /= n;
    s.gt_b1 /= n;
    s.gt_b4 /= n;
  };
  finalize(rep.caption);
  finalize(rep.history);
  finalize(rep.question);
  finalize(rep.caption_inc);
  finalize(rep.history_inc);
  finalize(rep.question_inc);
  rep.copy_rate = items.empty() ? 0.0 : static_cast<double>(copies) / static_cast<double>(items.size());
  return rep;
}

}  // namespace tham
