#pragma once

// Synthetic corpora with known structure, used by the trainer tests and
// the acceptance suite.

#include <string>
#include <vector>

#include "sessrec/dataset.hpp"
#include "sessrec/rng.hpp"

namespace synth {

inline sessrec::SessionCorpus corpus_from_indices(
    int n_users, int n_items, std::vector<std::vector<sessrec::Session>> sessions) {
  sessrec::SessionCorpus c;
  for (int u = 0; u < n_users; ++u) {
    c.users.push_back("u" + std::to_string(u));
    c.user_index.emplace(c.users.back(), u);
  }
  for (int v = 0; v < n_items; ++v) {
    c.items.push_back("i" + std::to_string(v));
    c.item_index.emplace(c.items.back(), v);
  }
  c.sessions = std::move(sessions);
  return c;
}

// Deterministic per-user Markov rule: user u always follows item a with
// item (a + shift_u) mod V. Every prefix fully determines its label.
inline sessrec::SessionCorpus make_shift_corpus(int n_users, int n_items, int sessions_per_user,
                                                int session_len, std::uint64_t seed) {
  sessrec::Rng rng(seed);
  std::vector<std::vector<sessrec::Session>> sessions(static_cast<std::size_t>(n_users));
  for (int u = 0; u < n_users; ++u) {
    const auto shift = static_cast<std::int32_t>(rng.uniform_int(1, n_items - 1));
    for (int s = 0; s < sessions_per_user; ++s) {
      sessrec::Session sess;
      auto v = static_cast<std::int32_t>(rng.uniform_int(0, n_items - 1));
      for (int k = 0; k < session_len; ++k) {
        sess.push_back(v);
        v = static_cast<std::int32_t>((v + shift) % n_items);
      }
      sessions[static_cast<std::size_t>(u)].push_back(std::move(sess));
    }
  }
  return corpus_from_indices(n_users, n_items, std::move(sessions));
}

// Two user cohorts over a shared vocabulary with opposite transition
// rules: each item gets two disjoint random successor sets of size
// `window`, one per cohort, and a walk steps uniformly within its
// cohort's set. Every (last item, cohort) pair thus has `window` valid
// next items and the other cohort's `window` are all wrong, so a
// cohort-blind model must hedge across 2*window candidates while a
// personalized one can rank its own window on top.
inline sessrec::SessionCorpus make_cohort_corpus(int n_users, int n_items, int sessions_per_user,
                                                 int session_len, int window, std::uint64_t seed) {
  sessrec::Rng rng(seed);
  std::vector<std::vector<std::int32_t>> succ_a(static_cast<std::size_t>(n_items));
  std::vector<std::vector<std::int32_t>> succ_b(static_cast<std::size_t>(n_items));
  std::vector<std::int32_t> pool;
  for (int v = 0; v < n_items; ++v) pool.push_back(v);
  for (int v = 0; v < n_items; ++v) {
    std::vector<std::int32_t> others;
    for (auto w : pool)
      if (w != v) others.push_back(w);
    rng.shuffle(others);
    succ_a[static_cast<std::size_t>(v)].assign(others.begin(), others.begin() + window);
    succ_b[static_cast<std::size_t>(v)].assign(others.begin() + window, others.begin() + 2 * window);
  }
  std::vector<std::vector<sessrec::Session>> sessions(static_cast<std::size_t>(n_users));
  for (int u = 0; u < n_users; ++u) {
    const auto& succ = u % 2 == 0 ? succ_a : succ_b;
    for (int s = 0; s < sessions_per_user; ++s) {
      sessrec::Session sess;
      auto v = static_cast<std::int32_t>(rng.uniform_int(0, n_items - 1));
      for (int k = 0; k < session_len; ++k) {
        sess.push_back(v);
        const auto& options = succ[static_cast<std::size_t>(v)];
        v = options[static_cast<std::size_t>(rng.uniform_int(0, window - 1))];
      }
      sessions[static_cast<std::size_t>(u)].push_back(std::move(sess));
    }
  }
  return corpus_from_indices(n_users, n_items, std::move(sessions));
}

}  // namespace synth
