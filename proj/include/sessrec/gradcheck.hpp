#pragma once

// End-to-end gradient verification: analytic gradients from one backward
// pass over a small model are compared element-by-element against central
// finite differences of the full forward computation.

#include <cmath>
#include <string>
#include <vector>

#include "sessrec/dataset.hpp"
#include "sessrec/graph.hpp"
#include "sessrec/model.hpp"
#include "sessrec/trainer.hpp"

namespace sessrec {

struct GradCheckOptions {
  std::uint64_t seed = 1;
  int n_items = 20;
  int n_users = 3;
  double step = 1e-5;        // central-difference step
  double tolerance = 1e-3;   // max scaled error allowed (use ~1e-2 in 32-bit)
  Fault fault = Fault::none;
};

struct ParamCheck {
  std::string name;
  double max_err = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// The micro model: |V| = 20, |U| = 3, d = 6, d' = 4, T = 2, batch norm on
// so that every parameter class exists and is exercised.
inline TrainConfig micro_gradcheck_config() {
  TrainConfig cfg;
  cfg.dim_item = 6;
  cfg.dim_user = 4;
  cfg.steps = 2;
  cfg.max_hist_sessions = 2;
  cfg.max_session_len = 6;
  cfg.batch_norm = true;
  cfg.precision = 64;
  return cfg;
}

namespace detail {

// A few short sessions per user with history, built deterministically.
inline std::vector<TrainingInstance> micro_instances(const GradCheckOptions& opts,
                                                     const TrainConfig& cfg) {
  Rng rng = Rng(opts.seed).split("gradcheck-data");
  SessionCorpus c;
  for (int u = 0; u < opts.n_users; ++u) {
    c.users.push_back("u" + std::to_string(u));
    c.user_index.emplace(c.users.back(), u);
  }
  for (int v = 0; v < opts.n_items; ++v) {
    c.items.push_back("i" + std::to_string(v));
    c.item_index.emplace(c.items.back(), v);
  }
  c.sessions.resize(static_cast<std::size_t>(opts.n_users));
  for (int u = 0; u < opts.n_users; ++u)
    for (int s = 0; s < 3; ++s) {
      Session sess;
      std::int32_t prev = -1;
      const int len = 3 + static_cast<int>(rng.uniform_int(0, 2));
      for (int k = 0; k < len; ++k) {
        auto v = static_cast<std::int32_t>(rng.uniform_int(0, opts.n_items - 1));
        if (v == prev) v = static_cast<std::int32_t>((v + 1) % opts.n_items);
        sess.push_back(v);
        prev = v;
      }
      c.sessions[static_cast<std::size_t>(u)].push_back(std::move(sess));
    }
  auto all = make_instances(c, static_cast<std::size_t>(cfg.max_hist_sessions),
                            static_cast<std::size_t>(cfg.max_session_len));
  // a handful is plenty; keep a spread of users and prefix lengths
  std::vector<TrainingInstance> kept;
  for (std::size_t i = 0; i < all.size(); i += 3) kept.push_back(all[i]);
  if (kept.size() > 5) kept.resize(5);
  return kept;
}

}  // namespace detail

template <typename T>
GradCheckReport run_micro_gradcheck(const GradCheckOptions& opts) {
  TrainConfig cfg = micro_gradcheck_config();
  cfg.seed = opts.seed;
  auto instances = detail::micro_instances(opts, cfg);
  std::vector<BehaviorGraph> graphs;
  for (const auto& inst : instances) graphs.push_back(build_graph(inst));

  auto ps = ParameterSet<T>::init(opts.n_items, opts.n_users, cfg, Rng(opts.seed).split("init"));

  auto batch_loss = [&](Tape<T>& tape) {
    Tensor<T> total;
    for (std::size_t i = 0; i < instances.size(); ++i) {
      auto scores = forward_scores(tape, ps, cfg, graphs[i], instances[i].user, /*training=*/true,
                                   opts.fault);
      auto l = bce_softmax_loss(tape, scores, instances[i].label);
      total = i == 0 ? l : tape.add(total, l);
    }
    return tape.scalar_mul(total, T(1) / static_cast<T>(instances.size()));
  };

  Tape<T> tape;
  tape.backward(batch_loss(tape));

  GradCheckReport report;
  report.tolerance = opts.tolerance;
  for (auto& [name, param] : ps.named_params()) {
    const auto& analytic = param.grad();
    auto& w = param.mut_value();
    double worst = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T keep = w[i];
      w[i] = keep + static_cast<T>(opts.step);
      Tape<T> up_tape;
      up_tape.set_recording(false);
      const double up = static_cast<double>(batch_loss(up_tape).item());
      w[i] = keep - static_cast<T>(opts.step);
      Tape<T> dn_tape;
      dn_tape.set_recording(false);
      const double dn = static_cast<double>(batch_loss(dn_tape).item());
      w[i] = keep;
      const double fd = (up - dn) / (2.0 * opts.step);
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({1e-5, std::abs(a), std::abs(fd)});
      worst = std::max(worst, std::abs(a - fd) / denom);
    }
    report.params.push_back({name, worst});
    report.max_err = std::max(report.max_err, worst);
  }
  for (auto& [name, param] : ps.named_params()) param.clear_grad();
  report.pass = report.max_err <= report.tolerance;
  return report;
}

}  // namespace sessrec
