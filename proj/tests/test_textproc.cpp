#include "tham/textproc.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "tham/rng.hpp"

using tham::bleu;
using tham::DiagnosticItem;
using tham::detokenize;
using tham::hallucination_report;
using tham::rouge_l;
using tham::shares_ngram;
using tham::tokenize;
using tham::TokenSeq;
using tham::Vocabulary;

namespace {

TEST(Tokenize, SplitsWordsAndPunctuation) {
  EXPECT_EQ(tokenize("Does he sit?"), (TokenSeq{"does", "he", "sit", "?"}));
  EXPECT_EQ(tokenize(""), TokenSeq{});
  EXPECT_EQ(tokenize("  a  b\t\nc "), (TokenSeq{"a", "b", "c"}));
}

TEST(Tokenize, RoundTripIsIdempotent) {
  const std::string s = "A red Dog, walking. is it?";
  const auto toks = tokenize(s);
  EXPECT_EQ(tokenize(detokenize(toks)), toks);
}

TEST(Vocabulary, BuildCoversCorpusWithReservedTokens) {
  const auto v = Vocabulary::build({tokenize("a b"), tokenize("b c")});
  EXPECT_EQ(v.size(), 8);  // 5 reserved + a, b, c
  // b has frequency 2, then a and c at 1 in lexicographic order.
  EXPECT_EQ(v.encode_token("b"), 5);
  EXPECT_EQ(v.encode_token("a"), 6);
  EXPECT_EQ(v.encode_token("c"), 7);
  EXPECT_EQ(v.encode_token("zebra"), Vocabulary::kUnk);

  const auto v2 = Vocabulary::build({tokenize("a b"), tokenize("b c")});
  EXPECT_EQ(v2.tokens(), v.tokens());
  EXPECT_EQ(v2.hash(), v.hash());
}

TEST(Vocabulary, ReservedIdsFixedAndDistinct) {
  Vocabulary v;
  EXPECT_EQ(Vocabulary::kPad, 0);
  EXPECT_EQ(Vocabulary::kBos, 1);
  EXPECT_EQ(Vocabulary::kEos, 2);
  EXPECT_EQ(Vocabulary::kUnk, 3);
  EXPECT_EQ(Vocabulary::kSep, 4);
  EXPECT_EQ(v.token(0), "<pad>");
  EXPECT_EQ(v.token(4), "<sep>");
}

TEST(Vocabulary, EmptyCorpusRejected) {
  EXPECT_THROW(Vocabulary::build({}), std::invalid_argument);
}

TEST(Vocabulary, RoundTripThroughTokenList) {
  const auto v = Vocabulary::build({tokenize("x y z y")});
  const auto v2 = Vocabulary::from_tokens(v.tokens());
  EXPECT_EQ(v2.tokens(), v.tokens());
  EXPECT_EQ(v2.hash(), v.hash());
}

TEST(Bleu, IdentityAndDisjoint) {
  const auto cand = tokenize("the cat sat on the mat");
  EXPECT_NEAR(bleu(cand, {cand}, 4), 1.0, 1e-12);
  EXPECT_LT(bleu(tokenize("x y z w"), {cand}, 1), 1e-6);
  EXPECT_EQ(bleu({}, {cand}, 4), 0.0);
}

TEST(Bleu, HandComputedBrevityPenaltyFixture) {
  // p1 = 3/3, BP = exp(1 - 4/3): frozen independently of the implementation.
  const double expected = 1.0 * std::exp(1.0 - 4.0 / 3.0);
  const double got = bleu(tokenize("the cat sat"), {tokenize("the cat sat down")}, 1);
  EXPECT_NEAR(got, expected, 1e-4);
  EXPECT_NEAR(got, 0.716531, 1e-4);
}

TEST(Bleu, ArgumentValidation) {
  EXPECT_THROW(bleu(tokenize("a"), {}, 1), std::invalid_argument);
  EXPECT_THROW(bleu(tokenize("a"), {tokenize("a")}, 0), std::invalid_argument);
  EXPECT_THROW(bleu(tokenize("a"), {tokenize("a")}, 5), std::invalid_argument);
}

TEST(Bleu, BoundedAndMonotoneInOrder) {
  tham::Rng rng(17);
  const TokenSeq words = {"a", "b", "c", "d", "e"};
  for (int trial = 0; trial < 200; ++trial) {
    auto draw = [&](int len) {
      TokenSeq s;
      for (int i = 0; i < len; ++i) s.push_back(words[static_cast<std::size_t>(rng.uniform_int(0, 4))]);
      return s;
    };
    const auto cand = draw(static_cast<int>(rng.uniform_int(4, 10)));
    const auto ref = draw(static_cast<int>(rng.uniform_int(4, 10)));
    double prev = 1.0;
    for (int n = 1; n <= 4; ++n) {
      const double s = bleu(cand, {ref}, n);
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, 1.0 + 1e-12);
      // Monotone non-increasing wherever smoothing has not kicked in.
      if (s > 1e-6 && prev > 1e-6) EXPECT_LE(s, prev + 1e-12);
      prev = s;
    }
  }
}

TEST(Bleu, MultiReferenceNeverBelowSingleReference) {
  tham::Rng rng(29);
  const TokenSeq words = {"a", "b", "c", "d", "e", "f"};
  for (int trial = 0; trial < 300; ++trial) {
    auto draw = [&](int len) {
      TokenSeq s;
      for (int i = 0; i < len; ++i) s.push_back(words[static_cast<std::size_t>(rng.uniform_int(0, 5))]);
      return s;
    };
    const auto cand = draw(static_cast<int>(rng.uniform_int(1, 8)));
    std::vector<TokenSeq> refs;
    const int k = static_cast<int>(rng.uniform_int(2, 4));
    for (int i = 0; i < k; ++i) refs.push_back(draw(static_cast<int>(rng.uniform_int(1, 9))));
    for (int n = 1; n <= 4; ++n) {
      const double multi = bleu(cand, refs, n);
      for (const auto& ref : refs) EXPECT_GE(multi + 1e-12, bleu(cand, {ref}, n));
    }
  }
}

TEST(RougeL, FixtureAndEdgeCases) {
  const auto cand = tokenize("a b c d");
  const auto ref = tokenize("a c d");
  // LCS = 3, P = 3/4, R = 3/3, F from the beta = 1.2 formula.
  const double p = 3.0 / 4.0, r = 1.0, beta = 1.2;
  const double expected = (1.0 + beta * beta) * p * r / (r + beta * beta * p);
  EXPECT_NEAR(rouge_l(cand, {ref}), expected, 1e-4);

  EXPECT_NEAR(rouge_l(cand, {cand}), 1.0, 1e-12);
  EXPECT_EQ(rouge_l(tokenize("x y"), {cand}), 0.0);
  EXPECT_EQ(rouge_l({}, {cand}), 0.0);
  // Max over references.
  EXPECT_NEAR(rouge_l(cand, {tokenize("q w e"), cand}), 1.0, 1e-12);
}

TEST(SharesNgram, DetectsTrigramOverlap) {
  const auto text = tokenize("a man is walking near a window");
  EXPECT_TRUE(shares_ngram(tokenize("he is walking near the door"), {text}));
  EXPECT_FALSE(shares_ngram(tokenize("the dog is green"), {text}));
  EXPECT_FALSE(shares_ngram(tokenize("is walking"), {text}));  // too short for a trigram
}

TEST(HallucinationReport, AllCorrectGivesEmptyIncorrectSubset) {
  std::vector<DiagnosticItem> items;
  for (int i = 0; i < 4; ++i) {
    DiagnosticItem it;
    it.prediction = tokenize("the dog is eating now");
    it.ground_truths = {it.prediction};
    it.caption = tokenize("a red dog in a room");
    it.history = {tokenize("what do you see ?"), tokenize("a dog and a ball")};
    it.question = tokenize("what is the dog doing ?");
    items.push_back(it);
  }
  const auto rep = hallucination_report(items);
  EXPECT_EQ(rep.n_incorrect, 0);
  EXPECT_EQ(rep.n_items, 4);
  EXPECT_EQ(rep.history_inc.count, 0);
}

TEST(HallucinationReport, VerbatimHistoryCopyDegenerateCase) {
  // Every prediction is a verbatim history sentence, disjoint from the
  // ground truth: incorrect-subset history similarity 1.0, copy-rate 1.0.
  std::vector<DiagnosticItem> items;
  for (int i = 0; i < 3; ++i) {
    DiagnosticItem it;
    it.history = {tokenize("he sits near the window today")};
    it.prediction = it.history[0];
    it.ground_truths = {tokenize("unrelated gold answer completely")};
    it.caption = tokenize("caption words only here");
    it.question = tokenize("irrelevant query tokens ?");
    items.push_back(it);
  }
  const auto rep = hallucination_report(items);
  EXPECT_EQ(rep.n_incorrect, 3);
  EXPECT_NEAR(rep.history_inc.pred_b1, 1.0, 1e-9);
  EXPECT_NEAR(rep.history_inc.pred_b4, 1.0, 1e-9);
  EXPECT_NEAR(rep.copy_rate, 1.0, 1e-12);
}

TEST(HallucinationReport, MatchesPerItemRecomputation) {
  // Mixed fixture of 10 items; the oracle recomputes every aggregate as a
  // plain mean of per-item metric values.
  tham::Rng rng(77);
  const TokenSeq words = {"a", "b", "c", "d", "e", "f", "g", "h"};
  auto draw = [&](int len) {
    TokenSeq s;
    for (int i = 0; i < len; ++i) s.push_back(words[static_cast<std::size_t>(rng.uniform_int(0, 7))]);
    return s;
  };
  std::vector<DiagnosticItem> items;
  for (int i = 0; i < 10; ++i) {
    DiagnosticItem it;
    it.prediction = draw(5);
    it.ground_truths = {draw(5), draw(6)};
    it.caption = draw(7);
    it.history = i % 3 == 0 ? std::vector<TokenSeq>{} : std::vector<TokenSeq>{draw(6), draw(4)};
    it.question = draw(4);
    items.push_back(it);
  }
  const auto rep = hallucination_report(items, 0.1);

  double cap_b1 = 0.0;
  std::int64_t cap_n = 0;
  double hist_b1 = 0.0;
  std::int64_t hist_n = 0;
  std::int64_t incorrect = 0;
  std::int64_t copies = 0;
  for (const auto& it : items) {
    cap_b1 += bleu(it.prediction, {it.caption}, 1);
    ++cap_n;
    if (!it.history.empty()) {
      hist_b1 += bleu(it.prediction, it.history, 1);
      ++hist_n;
    }
    if (bleu(it.prediction, it.ground_truths, 4) < 0.1) ++incorrect;
    std::vector<TokenSeq> inputs = it.history;
    inputs.push_back(it.caption);
    inputs.push_back(it.question);
    if (shares_ngram(it.prediction, inputs)) ++copies;
  }
  EXPECT_NEAR(rep.caption.pred_b1, cap_b1 / static_cast<double>(cap_n), 1e-12);
  EXPECT_EQ(rep.history.count, hist_n);
  EXPECT_NEAR(rep.history.pred_b1, hist_b1 / static_cast<double>(hist_n), 1e-12);
  EXPECT_EQ(rep.n_incorrect, incorrect);
  EXPECT_NEAR(rep.copy_rate, static_cast<double>(copies) / 10.0, 1e-12);
}

}  // namespace
