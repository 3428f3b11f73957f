#pragma once

// Caption metrics (BLEU, ROUGE-L, CIDEr), the embedding similarity score,
// garble detection and the two-group silhouette statistic. Token sequences are
// compared on their content tokens (BOS/EOS stripped).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fmm/common.hpp"
#include "fmm/surrogate.hpp"

namespace fmm {

using NGram = std::vector<Token>;

namespace detail {

inline std::map<NGram, std::size_t> ngram_counts(const std::vector<Token>& s, std::size_t n) {
  std::map<NGram, std::size_t> out;
  if (n == 0 || s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[NGram(s.begin() + i, s.begin() + i + n)];
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// BLEU

/// Clipped n-gram matches and the candidate's n-gram total.
struct NGramPrecision {
  std::size_t matches = 0;
  std::size_t total = 0;
};

inline NGramPrecision modified_precision(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
                                         std::size_t n) {
  const auto cand = detail::ngram_counts(candidate.content(), n);
  std::map<NGram, std::size_t> max_ref;
  for (const auto& r : references)
    for (const auto& [g, c] : detail::ngram_counts(r.content(), n)) max_ref[g] = std::max(max_ref[g], c);
  NGramPrecision p;
  for (const auto& [g, c] : cand) {
    p.total += c;
    const auto it = max_ref.find(g);
    if (it != max_ref.end()) p.matches += std::min(c, it->second);
  }
  return p;
}

/// Sentence BLEU. Zero matches at n >= 2 are smoothed to 1/(total+1); the
/// unigram precision is never smoothed. Brevity penalty uses the reference
/// length closest to the candidate's (shorter wins ties).
inline double bleu(const TokenSeq& candidate, const std::vector<TokenSeq>& references, std::size_t max_n = 4) {
  if (references.empty()) throw Error("empty_references", "bleu needs at least one reference");
  if (max_n < 1) throw Error("invalid_argument", "max_n must be >= 1");
  const std::size_t c = candidate.content().size();
  if (c == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const NGramPrecision p = modified_precision(candidate, references, n);
    double pn = 0.0;
    if (p.matches > 0) {
      pn = static_cast<double>(p.matches) / static_cast<double>(p.total);
    } else if (n >= 2) {
      pn = 1.0 / static_cast<double>(p.total + 1);
    } else {
      return 0.0;
    }
    log_sum += std::log(pn);
  }
  std::size_t r = references.front().content().size();
  for (const auto& ref : references) {
    const std::size_t len = ref.content().size();
    const auto diff = [&](std::size_t l) { return l > c ? l - c : c - l; };
    if (diff(len) < diff(r) || (diff(len) == diff(r) && len < r)) r = len;
  }
  const double bp = c < r ? std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c)) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

inline double bleu(const TokenSeq& candidate, const TokenSeq& reference, std::size_t max_n = 4) {
  return bleu(candidate, std::vector<TokenSeq>{reference}, max_n);
}

// ---------------------------------------------------------------------------
// ROUGE-L

inline std::size_t lcs_length(const std::vector<Token>& a, const std::vector<Token>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline constexpr double kRougeBeta2 = 1.44;  // beta = 1.2

inline double rouge_l(const TokenSeq& candidate, const TokenSeq& reference) {
  const auto c = candidate.content();
  const auto r = reference.content();
  if (c.empty() || r.empty()) return 0.0;
  const std::size_t lcs = lcs_length(c, r);
  if (lcs == 0) return 0.0;
  const double p = static_cast<double>(lcs) / static_cast<double>(c.size());
  const double rec = static_cast<double>(lcs) / static_cast<double>(r.size());
  return (1.0 + kRougeBeta2) * p * rec / (rec + kRougeBeta2 * p);
}

/// ROUGE-L over whitespace-separated words.
inline double rouge_l_text(const std::string& candidate, const std::string& reference) {
  std::map<std::string, Token> ids;
  const auto encode = [&](const std::string& text) {
    TokenSeq seq;
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
      std::size_t j = i;
      while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
      if (j > i) seq.tokens.push_back(ids.try_emplace(text.substr(i, j - i), static_cast<Token>(ids.size() + 2)).first->second);
      i = j;
    }
    return seq;
  };
  const TokenSeq c = encode(candidate);
  return rouge_l(c, encode(reference));
}

// ---------------------------------------------------------------------------
// CIDEr

namespace detail {

using TfIdf = std::map<NGram, double>;

inline TfIdf tfidf(const std::vector<Token>& s, std::size_t n, const std::map<NGram, std::size_t>& df,
                   double corpus_size) {
  TfIdf v;
  const auto counts = ngram_counts(s, n);
  std::size_t total = 0;
  for (const auto& [g, c] : counts) total += c;
  for (const auto& [g, c] : counts) {
    const auto it = df.find(g);
    const double d = it == df.end() ? 0.0 : static_cast<double>(it->second);
    // n-grams never seen in the references get df = 0; clamp to 1 so they
    // carry the maximal weight log(N).
    const double idf = std::log(corpus_size / std::max(1.0, d));
    v[g] = static_cast<double>(c) / static_cast<double>(total) * idf;
  }
  return v;
}

inline double cosine(const TfIdf& a, const TfIdf& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [g, x] : a) {
    na += x * x;
    const auto it = b.find(g);
    if (it != b.end()) dot += x * it->second;
  }
  for (const auto& [g, y] : b) nb += y * y;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

inline constexpr std::size_t kCiderMaxN = 4;
inline constexpr double kCiderScale = 10.0;

/// Per-item CIDEr: for n = 1..4, TF-IDF vectors with document frequencies
/// taken over the reference sets (one document per item), cosine averaged
/// over each item's references, then averaged over n and scaled by 10.
inline std::vector<double> cider_items(const std::vector<TokenSeq>& candidates,
                                       const std::vector<std::vector<TokenSeq>>& references) {
  if (candidates.size() != references.size())
    throw Error("misaligned_corpora", "cider needs one reference list per candidate");
  if (candidates.empty()) throw Error("misaligned_corpora", "cider needs a nonempty corpus");
  for (const auto& refs : references)
    if (refs.empty()) throw Error("empty_references", "every cider item needs a reference");
  const double corpus = static_cast<double>(candidates.size());
  std::vector<double> scores(candidates.size(), 0.0);
  for (std::size_t n = 1; n <= kCiderMaxN; ++n) {
    std::map<NGram, std::size_t> df;
    for (const auto& refs : references) {
      std::map<NGram, bool> seen;
      for (const auto& r : refs)
        for (const auto& [g, c] : detail::ngram_counts(r.content(), n)) seen[g] = true;
      for (const auto& [g, b] : seen) ++df[g];
    }
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto vc = detail::tfidf(candidates[i].content(), n, df, corpus);
      double sum = 0.0;
      for (const auto& r : references[i]) sum += detail::cosine(vc, detail::tfidf(r.content(), n, df, corpus));
      scores[i] += sum / static_cast<double>(references[i].size());
    }
  }
  for (double& s : scores) s *= kCiderScale / static_cast<double>(kCiderMaxN);
  return scores;
}

inline double cider(const std::vector<TokenSeq>& candidates, const std::vector<std::vector<TokenSeq>>& references) {
  const auto items = cider_items(candidates, references);
  return std::accumulate(items.begin(), items.end(), 0.0) / static_cast<double>(items.size());
}

// ---------------------------------------------------------------------------
// Embedding similarity

/// Cosine of the two unit text embeddings; 0 when either side is empty.
inline double clip_sim(const SurrogateModel& m, const TokenSeq& a, const TokenSeq& b) {
  const TextEmbedding ea = text_embedding(m, a);
  const TextEmbedding eb = text_embedding(m, b);
  if (ea.empty || eb.empty) return 0.0;
  double dot = 0.0;
  for (std::size_t i = 0; i < ea.values.size(); ++i) dot += ea.values[i] * eb.values[i];
  return std::clamp(dot, -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Garble detection

struct GarbleParams {
  std::size_t min_run = 4;       // a run this long flags the sequence
  double dominance = 0.6;        // share of the most frequent token ...
  std::size_t min_length = 5;    // ... in sequences at least this long
};

inline bool is_garbled(const TokenSeq& t, const GarbleParams& p = {}) {
  const auto s = t.content();
  if (s.empty()) return false;
  std::size_t run = 1, best_run = 1;
  for (std::size_t i = 1; i < s.size(); ++i) {
    run = s[i] == s[i - 1] ? run + 1 : 1;
    best_run = std::max(best_run, run);
  }
  if (best_run >= p.min_run) return true;
  if (s.size() < p.min_length) return false;
  std::map<Token, std::size_t> freq;
  for (Token x : s) ++freq[x];
  std::size_t top = 0;
  for (const auto& [tok, c] : freq) top = std::max(top, c);
  return static_cast<double>(top) >= p.dominance * static_cast<double>(s.size());
}

inline double garble_rate(const std::vector<TokenSeq>& ts, const GarbleParams& p = {}) {
  if (ts.empty()) return 0.0;
  std::size_t n = 0;
  for (const auto& t : ts) n += is_garbled(t, p) ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(ts.size());
}

// ---------------------------------------------------------------------------
// Cluster separation

/// Mean silhouette coefficient of the two labelled groups, Euclidean distance.
/// A point whose intra- and inter-group mean distances are both 0 scores 0.
inline double cluster_separation(const std::vector<std::vector<double>>& clean,
                                 const std::vector<std::vector<double>>& adv) {
  if (clean.size() < 2 || adv.size() < 2) throw Error("singleton_cluster", "each group needs at least 2 vectors");
  const std::size_t dim = clean.front().size();
  for (const auto* g : {&clean, &adv})
    for (const auto& v : *g)
      if (v.size() != dim) throw Error("shape_mismatch", "cluster vectors differ in dimension");
  std::vector<const std::vector<double>*> pts;
  std::vector<int> label;
  for (const auto& v : clean) pts.push_back(&v), label.push_back(0);
  for (const auto& v : adv) pts.push_back(&v), label.push_back(1);
  const auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      const double d = (*pts[i])[k] - (*pts[j])[k];
      s += d * d;
    }
    return std::sqrt(s);
  };
  double total = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double same = 0.0, other = 0.0;
    std::size_t n_same = 0, n_other = 0;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (i == j) continue;
      if (label[j] == label[i]) {
        same += dist(i, j);
        ++n_same;
      } else {
        other += dist(i, j);
        ++n_other;
      }
    }
    const double a = same / static_cast<double>(n_same), b = other / static_cast<double>(n_other);
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(pts.size());
}

struct ClusterReport {
  double separation_video = 0.0;
  double separation_hidden = 0.0;
};

inline void to_json(nlohmann::json& j, const ClusterReport& r) {
  j = nlohmann::json{{"separation_video", r.separation_video}, {"separation_hidden", r.separation_hidden}};
}

// ---------------------------------------------------------------------------
// Metric rows

struct MetricRow {
  std::string run_id;
  double clip_sim = 0.0;
  double bleu = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  bool garbled = false;
  double sparsity = 0.0;
  double delta_bar = 0.0;
};

inline constexpr const char* kMetricCsvHeader = "run_id,clip_sim,bleu,rouge_l,cider,garbled,sparsity,delta_bar";

namespace detail {

/// Shortest round-trip representation is not needed; a fixed %.10g keeps the
/// files stable and readable.
inline std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

inline std::string to_csv_line(const MetricRow& r) {
  using detail::fmt_real;
  return detail::csv_field(r.run_id) + "," + fmt_real(r.clip_sim) + "," + fmt_real(r.bleu) + "," +
         fmt_real(r.rouge_l) + "," + fmt_real(r.cider) + "," + (r.garbled ? "1" : "0") + "," +
         fmt_real(r.sparsity) + "," + fmt_real(r.delta_bar);
}

inline void write_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << kMetricCsvHeader << '\n';
  for (const auto& r : rows) os << to_csv_line(r) << '\n';
}

inline void to_json(nlohmann::json& j, const MetricRow& r) {
  j = nlohmann::json{{"run_id", r.run_id},   {"clip_sim", r.clip_sim}, {"bleu", r.bleu},
                     {"rouge_l", r.rouge_l}, {"cider", r.cider},       {"garbled", r.garbled},
                     {"sparsity", r.sparsity}, {"delta_bar", r.delta_bar}};
}

}  // namespace fmm
