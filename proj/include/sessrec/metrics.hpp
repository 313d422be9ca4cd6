#pragma once

// Ranking metrics (Recall@K, MRR@K), frequency and item-similarity
// baselines, and bucketed breakdowns of results by instance features.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "sessrec/dataset.hpp"
#include "sessrec/errors.hpp"

namespace sessrec {

struct RankedResult {
  std::int64_t instance = 0;
  int rank = 0;  // 1-based rank of the label, ties broken by ascending item index
  int prefix_len = 0;
  int history_count = 0;  // uncapped available history of the instance
  std::vector<std::int32_t> topk;
};

// Rank without sorting: 1 + items scoring strictly higher + equal-scoring
// items with a smaller index.
template <typename Scores>
int rank_of_label(const Scores& scores, std::int32_t label) {
  const auto s = scores[static_cast<std::size_t>(label)];
  int rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > s) ++rank;
    else if (scores[i] == s && static_cast<std::int32_t>(i) < label) ++rank;
  }
  return rank;
}

template <typename Scores>
std::vector<std::int32_t> top_k_items(const Scores& scores, int k) {
  std::vector<std::int32_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int32_t>(i);
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(),
                    [&](std::int32_t a, std::int32_t b) {
                      const auto sa = scores[static_cast<std::size_t>(a)];
                      const auto sb = scores[static_cast<std::size_t>(b)];
                      if (sa != sb) return sa > sb;
                      return a < b;
                    });
  idx.resize(kk);
  return idx;
}

inline double recall_at_k(const std::vector<RankedResult>& results, int k) {
  if (k < 1) throw ContractError("recall_at_k: K must be >= 1");
  if (results.empty()) throw ContractError("recall_at_k: no results");
  std::size_t hits = 0;
  for (const auto& r : results)
    if (r.rank <= k) ++hits;
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

inline double mrr_at_k(const std::vector<RankedResult>& results, int k) {
  if (k < 1) throw ContractError("mrr_at_k: K must be >= 1");
  if (results.empty()) throw ContractError("mrr_at_k: no results");
  double sum = 0.0;
  for (const auto& r : results)
    if (r.rank <= k) sum += 1.0 / static_cast<double>(r.rank);
  return sum / static_cast<double>(results.size());
}

// ---- baselines -------------------------------------------------------------

// Static popularity scores: training interaction frequency per item.
class PopScorer {
 public:
  explicit PopScorer(const SessionCorpus& train) : scores_(train.n_items(), 0.0) {
    for (const auto& us : train.sessions)
      for (const auto& s : us)
        for (auto v : s) scores_[static_cast<std::size_t>(v)] += 1.0;
  }

  const std::vector<double>& score(const Session& /*prefix*/) const { return scores_; }
  const std::vector<double>& frequencies() const { return scores_; }

 private:
  std::vector<double> scores_;
};

// Item-to-item cosine similarity over binary session incidence: an item's
// vector marks the sessions it appears in; candidates are scored by
// similarity to the last prefix item.
class ItemKnnScorer {
 public:
  explicit ItemKnnScorer(const SessionCorpus& train)
      : n_items_(train.n_items()), session_count_(train.n_items(), 0.0) {
    for (const auto& us : train.sessions)
      for (const auto& s : us) {
        std::vector<std::int32_t> distinct(s.begin(), s.end());
        std::sort(distinct.begin(), distinct.end());
        distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
        for (std::size_t a = 0; a < distinct.size(); ++a) {
          session_count_[static_cast<std::size_t>(distinct[a])] += 1.0;
          for (std::size_t b = a + 1; b < distinct.size(); ++b)
            cooc_[key(distinct[a], distinct[b])] += 1.0;
        }
      }
  }

  std::vector<double> score(const Session& prefix) const {
    std::vector<double> out(n_items_, 0.0);
    if (prefix.empty()) return out;
    const auto last = prefix.back();
    const double denom_last = session_count_[static_cast<std::size_t>(last)];
    if (denom_last == 0.0) return out;  // unseen anchor item
    for (std::size_t v = 0; v < n_items_; ++v) {
      const auto cand = static_cast<std::int32_t>(v);
      const double both = cand == last ? denom_last : cooc_count(last, cand);
      if (both == 0.0) continue;
      out[v] = both / std::sqrt(denom_last * session_count_[v]);
    }
    return out;
  }

 private:
  static std::uint64_t key(std::int32_t a, std::int32_t b) {
    if (a > b) std::swap(a, b);
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }
  double cooc_count(std::int32_t a, std::int32_t b) const {
    auto it = cooc_.find(key(a, b));
    return it == cooc_.end() ? 0.0 : it->second;
  }

  std::size_t n_items_;
  std::vector<double> session_count_;
  std::unordered_map<std::uint64_t, double> cooc_;
};

// ---- breakdowns -------------------------------------------------------------

enum class BreakdownAxis {
  prefix_length,
  history_count,
  history_group,  // history count grouped into width-w intervals [1,w), [w,2w), ...
};

struct BreakdownRow {
  std::string bucket;
  std::size_t count = 0;  // instances per run
  int k = 0;
  double recall_mean = 0.0, recall_std = 0.0;
  double mrr_mean = 0.0, mrr_std = 0.0;
};

namespace detail {

inline std::pair<int, std::string> bucket_of(const RankedResult& r, BreakdownAxis axis, int width) {
  switch (axis) {
    case BreakdownAxis::prefix_length:
      return {r.prefix_len, std::to_string(r.prefix_len)};
    case BreakdownAxis::history_count:
      return {r.history_count, std::to_string(r.history_count)};
    case BreakdownAxis::history_group: {
      if (r.history_count == 0) return {0, "0"};
      const int g = r.history_count / width;
      const int lo = g == 0 ? 1 : g * width;
      return {g + 1, "[" + std::to_string(lo) + "," + std::to_string((g + 1) * width) + ")"};
    }
  }
  return {0, "?"};
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace detail

// Bucketed Recall@K / MRR@K. Multiple runs (e.g. different seeds) supply
// the across-run standard deviation; instance counts come from the first
// run. Buckets with no instances in some run are skipped for that run.
inline std::vector<BreakdownRow> breakdown(const std::vector<std::vector<RankedResult>>& runs,
                                           BreakdownAxis axis, const std::vector<int>& ks,
                                           int group_width = 10) {
  if (runs.empty()) throw ContractError("breakdown: no runs");
  std::map<int, std::string> labels;
  std::map<int, std::vector<std::vector<RankedResult>>> per_bucket;  // bucket -> run -> results
  for (std::size_t run = 0; run < runs.size(); ++run)
    for (const auto& r : runs[run]) {
      auto [key, label] = detail::bucket_of(r, axis, group_width);
      labels[key] = label;
      auto& slot = per_bucket[key];
      if (slot.size() < runs.size()) slot.resize(runs.size());
      slot[run].push_back(r);
    }

  std::vector<BreakdownRow> rows;
  for (auto& [key, by_run] : per_bucket) {
    for (int k : ks) {
      BreakdownRow row;
      row.bucket = labels[key];
      row.k = k;
      row.count = by_run[0].size();
      std::vector<double> recalls, mrrs;
      for (const auto& results : by_run) {
        if (results.empty()) continue;
        recalls.push_back(recall_at_k(results, k));
        mrrs.push_back(mrr_at_k(results, k));
      }
      row.recall_mean = detail::mean_of(recalls);
      row.recall_std = detail::std_of(recalls);
      row.mrr_mean = detail::mean_of(mrrs);
      row.mrr_std = detail::std_of(mrrs);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

// CSV rows `metric,K,bucket,value,count`; "all" is the global bucket.
inline void write_metrics_csv(std::ostream& os, const std::vector<RankedResult>& results,
                              const std::vector<int>& ks) {
  os << "metric,K,bucket,value,count\n";
  for (int k : ks) {
    os << "recall," << k << ",all," << recall_at_k(results, k) << ',' << results.size() << '\n';
    os << "mrr," << k << ",all," << mrr_at_k(results, k) << ',' << results.size() << '\n';
  }
}

inline void write_breakdown_csv(std::ostream& os, const std::vector<BreakdownRow>& rows,
                                bool with_std) {
  for (const auto& row : rows) {
    os << "recall," << row.k << ',' << row.bucket << ',' << row.recall_mean << ',' << row.count << '\n';
    os << "mrr," << row.k << ',' << row.bucket << ',' << row.mrr_mean << ',' << row.count << '\n';
    if (with_std) {
      os << "recall_std," << row.k << ',' << row.bucket << ',' << row.recall_std << ',' << row.count << '\n';
      os << "mrr_std," << row.k << ',' << row.bucket << ',' << row.mrr_std << ',' << row.count << '\n';
    }
  }
}

}  // namespace sessrec
