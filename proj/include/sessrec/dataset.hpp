#pragma once

// Interaction-log ingestion and session preprocessing: idle-threshold
// session splitting, duplicate collapsing, length/user filtering,
// chronological train/test splitting, and (history, prefix, label)
// instance generation.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "sessrec/errors.hpp"

namespace sessrec {

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;  // seconds since epoch
};

struct IngestOptions {
  // Rows whose optional 4th column matches one of these action tags are
  // dropped at ingestion (e.g. "delete" events).
  std::set<std::string> drop_actions;
};

// One line per interaction: user<TAB>item<TAB>timestamp[<TAB>action].
// Lines beginning with '#' and blank lines are ignored.
inline std::vector<Interaction> parse_interactions(std::istream& in,
                                                   const IngestOptions& opts = {}) {
  std::vector<Interaction> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3 && fields.size() != 4)
      throw DataError("line " + std::to_string(lineno) + ": expected 3 or 4 tab-separated fields, got " +
                      std::to_string(fields.size()));
    if (fields[0].empty() || fields[1].empty())
      throw DataError("line " + std::to_string(lineno) + ": empty user or item id");
    std::int64_t ts = 0;
    try {
      std::size_t pos = 0;
      ts = std::stoll(fields[2], &pos);
      if (pos != fields[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw DataError("line " + std::to_string(lineno) + ": bad timestamp '" + fields[2] + "'");
    }
    if (ts < 0) throw DataError("line " + std::to_string(lineno) + ": negative timestamp");
    if (fields.size() == 4 && opts.drop_actions.count(fields[3])) continue;
    out.push_back(Interaction{std::move(fields[0]), std::move(fields[1]), ts});
  }
  return out;
}

inline std::vector<Interaction> parse_interactions_file(const std::string& path,
                                                        const IngestOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open input file: " + path);
  try {
    return parse_interactions(in, opts);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

using Session = std::vector<std::int32_t>;

struct SessionCorpus {
  std::vector<std::string> users;  // index -> id
  std::vector<std::string> items;
  std::unordered_map<std::string, std::int32_t> user_index;
  std::unordered_map<std::string, std::int32_t> item_index;
  // sessions[u] is user u's chronologically ordered session list
  std::vector<std::vector<Session>> sessions;

  std::size_t n_users() const { return users.size(); }
  std::size_t n_items() const { return items.size(); }
  std::size_t n_sessions() const {
    std::size_t n = 0;
    for (const auto& s : sessions) n += s.size();
    return n;
  }
  std::size_t n_events() const {
    std::size_t n = 0;
    for (const auto& us : sessions)
      for (const auto& s : us) n += s.size();
    return n;
  }
};

// Cut each user's time-ordered event stream into sessions wherever the gap
// between consecutive events exceeds idle_minutes, then collapse
// consecutive repetitions of the same item inside a session. Timestamp
// ties keep input order (stable sort).
inline SessionCorpus split_sessions(const std::vector<Interaction>& events, double idle_minutes) {
  SessionCorpus c;
  std::vector<std::vector<std::size_t>> per_user;  // event positions per user
  for (std::size_t i = 0; i < events.size(); ++i) {
    auto [it, inserted] =
        c.user_index.try_emplace(events[i].user, static_cast<std::int32_t>(c.users.size()));
    if (inserted) {
      c.users.push_back(events[i].user);
      per_user.emplace_back();
    }
    per_user[static_cast<std::size_t>(it->second)].push_back(i);
  }
  c.sessions.resize(c.users.size());
  const double gap_limit = idle_minutes * 60.0;
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    auto& order = per_user[u];
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return events[a].timestamp < events[b].timestamp;
    });
    Session cur;
    std::int64_t prev_ts = 0;
    auto flush = [&]() {
      if (!cur.empty()) c.sessions[u].push_back(std::move(cur));
      cur = {};
    };
    for (std::size_t k = 0; k < order.size(); ++k) {
      const Interaction& ev = events[order[k]];
      if (!cur.empty() && static_cast<double>(ev.timestamp - prev_ts) > gap_limit) flush();
      auto [it, inserted] =
          c.item_index.try_emplace(ev.item, static_cast<std::int32_t>(c.items.size()));
      if (inserted) c.items.push_back(ev.item);
      if (cur.empty() || cur.back() != it->second) cur.push_back(it->second);
      prev_ts = ev.timestamp;
    }
    flush();
  }
  return c;
}

namespace detail {

// Rebuild dense vocabularies from the surviving sessions, preserving the
// relative order of the original indices.
inline SessionCorpus compact(const SessionCorpus& old,
                             const std::vector<std::vector<Session>>& kept_sessions) {
  SessionCorpus c;
  std::vector<std::int32_t> item_map(old.items.size(), -1);
  std::vector<bool> item_seen(old.items.size(), false);
  std::vector<bool> user_kept(old.users.size(), false);
  for (std::size_t u = 0; u < kept_sessions.size(); ++u) {
    if (kept_sessions[u].empty()) continue;
    user_kept[u] = true;
    for (const auto& s : kept_sessions[u])
      for (auto v : s) item_seen[static_cast<std::size_t>(v)] = true;
  }
  for (std::size_t v = 0; v < old.items.size(); ++v) {
    if (!item_seen[v]) continue;
    item_map[v] = static_cast<std::int32_t>(c.items.size());
    c.items.push_back(old.items[v]);
    c.item_index.emplace(old.items[v], item_map[v]);
  }
  for (std::size_t u = 0; u < old.users.size(); ++u) {
    if (!user_kept[u]) continue;
    const auto nu = static_cast<std::int32_t>(c.users.size());
    c.users.push_back(old.users[u]);
    c.user_index.emplace(old.users[u], nu);
    c.sessions.emplace_back();
    for (const auto& s : kept_sessions[u]) {
      Session ns;
      ns.reserve(s.size());
      for (auto v : s) ns.push_back(item_map[static_cast<std::size_t>(v)]);
      c.sessions.back().push_back(std::move(ns));
    }
  }
  return c;
}

}  // namespace detail

// Fixpoint of {drop sessions shorter than min_session_len, drop users with
// fewer than min_user_sessions sessions}; vocabularies rebuilt densely.
inline SessionCorpus filter_corpus(const SessionCorpus& c, std::size_t min_session_len,
                                   std::size_t min_user_sessions) {
  std::vector<std::vector<Session>> kept = c.sessions;
  bool changed = true;
  while (changed) {
    changed = false;
    for (auto& us : kept) {
      const auto before = us.size();
      us.erase(std::remove_if(us.begin(), us.end(),
                              [&](const Session& s) { return s.size() < min_session_len; }),
               us.end());
      if (us.size() != before) changed = true;
      if (!us.empty() && us.size() < min_user_sessions) {
        us.clear();
        changed = true;
      }
    }
  }
  return detail::compact(c, kept);
}

// Chronological per-user split: the first floor(n * train_frac) sessions
// (at least 1, at most n-1 when n >= 2) go to train, the rest to test.
// Single-session users are train-only. Both returned corpora share the
// training vocabularies; test items unseen in training are dropped, and
// test sessions with fewer than 2 remaining items are discarded.
inline std::pair<SessionCorpus, SessionCorpus> split_train_test(const SessionCorpus& c,
                                                                double train_frac) {
  if (!(train_frac > 0.0 && train_frac < 1.0))
    throw ContractError("split_train_test: train_frac must be in (0, 1)");
  std::vector<std::vector<Session>> train_keep(c.sessions.size()), test_keep(c.sessions.size());
  for (std::size_t u = 0; u < c.sessions.size(); ++u) {
    const auto& us = c.sessions[u];
    const std::size_t n = us.size();
    if (n == 0) continue;
    std::size_t n_train = n == 1 ? 1
                                 : std::clamp<std::size_t>(
                                       static_cast<std::size_t>(static_cast<double>(n) * train_frac),
                                       1, n - 1);
    train_keep[u].assign(us.begin(), us.begin() + static_cast<std::ptrdiff_t>(n_train));
    test_keep[u].assign(us.begin() + static_cast<std::ptrdiff_t>(n_train), us.end());
  }
  SessionCorpus train = detail::compact(c, train_keep);

  SessionCorpus test;
  test.users = train.users;
  test.items = train.items;
  test.user_index = train.user_index;
  test.item_index = train.item_index;
  test.sessions.assign(train.users.size(), {});
  for (std::size_t u = 0; u < test_keep.size(); ++u) {
    if (test_keep[u].empty()) continue;
    auto it = train.user_index.find(c.users[u]);
    if (it == train.user_index.end()) continue;  // user lost all train sessions upstream
    for (const auto& s : test_keep[u]) {
      Session ns;
      for (auto v : s) {
        auto vi = train.item_index.find(c.items[static_cast<std::size_t>(v)]);
        if (vi != train.item_index.end()) ns.push_back(vi->second);
      }
      if (ns.size() >= 2) test.sessions[static_cast<std::size_t>(it->second)].push_back(std::move(ns));
    }
  }
  return {std::move(train), std::move(test)};
}

// Re-express `other`'s sessions in `reference`'s vocabularies: items
// unknown to the reference are dropped, sessions left with fewer than 2
// items are discarded, users are matched by id. Used to align a held-out
// split with the final training vocabulary.
inline SessionCorpus project_corpus(const SessionCorpus& reference, const SessionCorpus& other) {
  SessionCorpus out;
  out.users = reference.users;
  out.items = reference.items;
  out.user_index = reference.user_index;
  out.item_index = reference.item_index;
  out.sessions.assign(reference.users.size(), {});
  for (std::size_t u = 0; u < other.sessions.size(); ++u) {
    auto uit = reference.user_index.find(other.users[u]);
    if (uit == reference.user_index.end()) continue;
    for (const auto& s : other.sessions[u]) {
      Session ns;
      for (auto v : s) {
        auto vit = reference.item_index.find(other.items[static_cast<std::size_t>(v)]);
        if (vit != reference.item_index.end()) ns.push_back(vit->second);
      }
      if (ns.size() >= 2)
        out.sessions[static_cast<std::size_t>(uit->second)].push_back(std::move(ns));
    }
  }
  return out;
}

struct TrainingInstance {
  std::int32_t user = 0;
  std::vector<Session> history;  // up to M most recent sessions, oldest first
  Session prefix;                // nonempty, at most max_session_len items
  std::int32_t label = 0;
  std::int32_t available_history = 0;  // uncapped count of earlier sessions
};

enum class InstanceMode {
  training,    // skip each user's first session (it has no history)
  evaluation,  // include it; empty history is handled downstream
};

// Per-prefix segmentation: session i with items v1..vm yields instances
// (prefix = v1..vp, label = v_{p+1}) for p in [1, m-1], each carrying the
// up-to-M most recent earlier sessions as history.
inline std::vector<TrainingInstance> make_instances(const SessionCorpus& c, std::size_t max_history,
                                                    std::size_t max_session_len,
                                                    InstanceMode mode = InstanceMode::training) {
  if (max_session_len < 1) throw ContractError("make_instances: max_session_len must be >= 1");
  std::vector<TrainingInstance> out;
  for (std::size_t u = 0; u < c.sessions.size(); ++u) {
    const auto& us = c.sessions[u];
    const std::size_t first = mode == InstanceMode::training ? 1 : 0;
    for (std::size_t i = first; i < us.size(); ++i) {
      const Session& s = us[i];
      if (s.size() < 2) continue;
      const std::size_t h_begin = i > max_history ? i - max_history : 0;
      std::vector<Session> history(us.begin() + static_cast<std::ptrdiff_t>(h_begin),
                                   us.begin() + static_cast<std::ptrdiff_t>(i));
      for (std::size_t p = 1; p < s.size(); ++p) {
        TrainingInstance inst;
        inst.user = static_cast<std::int32_t>(u);
        inst.history = history;
        const std::size_t start = p > max_session_len ? p - max_session_len : 0;
        inst.prefix.assign(s.begin() + static_cast<std::ptrdiff_t>(start),
                           s.begin() + static_cast<std::ptrdiff_t>(p));
        inst.label = s[p];
        inst.available_history = static_cast<std::int32_t>(i);
        out.push_back(std::move(inst));
      }
    }
  }
  return out;
}

// ---- corpus file format -----------------------------------------------

// JSON with the full vocabularies and per-user session lists; see README
// for the schema. Self-contained: split files repeat the shared
// vocabularies so each file loads on its own.
inline void save_corpus(const SessionCorpus& c, const std::string& path) {
  nlohmann::json j;
  j["format"] = "sessrec-corpus";
  j["version"] = 1;
  j["users"] = c.users;
  j["items"] = c.items;
  j["sessions"] = c.sessions;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write corpus file: " + path);
  out << j.dump() << '\n';
}

inline SessionCorpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError("corpus file " + path + ": " + e.what());
  }
  if (j.value("format", "") != "sessrec-corpus" || j.value("version", 0) != 1)
    throw DataError("corpus file " + path + ": unknown format or version");
  SessionCorpus c;
  j.at("users").get_to(c.users);
  j.at("items").get_to(c.items);
  j.at("sessions").get_to(c.sessions);
  if (c.sessions.size() != c.users.size())
    throw DataError("corpus file " + path + ": sessions/users length mismatch");
  for (const auto& us : c.sessions)
    for (const auto& s : us)
      for (auto v : s)
        if (v < 0 || static_cast<std::size_t>(v) >= c.items.size())
          throw DataError("corpus file " + path + ": item index out of range");
  for (std::size_t i = 0; i < c.users.size(); ++i)
    c.user_index.emplace(c.users[i], static_cast<std::int32_t>(i));
  for (std::size_t i = 0; i < c.items.size(); ++i)
    c.item_index.emplace(c.items[i], static_cast<std::int32_t>(i));
  return c;
}

struct CorpusStats {
  std::size_t users = 0, items = 0, sessions = 0, events = 0;
  double avg_session_len = 0.0, sessions_per_user = 0.0;
};

inline CorpusStats compute_stats(const SessionCorpus& c) {
  CorpusStats s;
  s.users = c.n_users();
  s.items = c.n_items();
  s.sessions = c.n_sessions();
  s.events = c.n_events();
  s.avg_session_len = s.sessions ? static_cast<double>(s.events) / static_cast<double>(s.sessions) : 0.0;
  s.sessions_per_user = s.users ? static_cast<double>(s.sessions) / static_cast<double>(s.users) : 0.0;
  return s;
}

}  // namespace sessrec
