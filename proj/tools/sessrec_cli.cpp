// Command-line driver: dataset preparation, training, evaluation, and
// gradient checking for the session-aware recommender.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sessrec/config.hpp"
#include "sessrec/dataset.hpp"
#include "sessrec/gradcheck.hpp"
#include "sessrec/graph.hpp"
#include "sessrec/metrics.hpp"
#include "sessrec/model.hpp"
#include "sessrec/trainer.hpp"

namespace fs = std::filesystem;
using namespace sessrec;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

void echo_config(std::ostream& os, const TrainConfig& cfg) {
  for (auto& [k, v] : config_to_kv(cfg)) os << "config " << k << '=' << v << '\n';
}

// ---- prepare ----------------------------------------------------------------

struct PrepareArgs {
  std::string input, output;
  double idle_minutes = 30.0;
  int min_session_len = 3;
  int min_user_sessions = 5;
  double train_frac = 0.8;
  double valid_frac = 0.0;
  std::vector<std::string> drop_actions;
  std::string preset;
};

int cmd_prepare(const PrepareArgs& args) {
  double idle = args.idle_minutes;
  if (args.preset == "reddit" && idle == 30.0) idle = 60.0;

  IngestOptions ingest;
  for (const auto& a : args.drop_actions) ingest.drop_actions.insert(a);
  auto events = parse_interactions_file(args.input, ingest);
  auto corpus = filter_corpus(split_sessions(events, idle),
                              static_cast<std::size_t>(args.min_session_len),
                              static_cast<std::size_t>(args.min_user_sessions));
  if (corpus.n_sessions() == 0)
    throw DataError("no sessions survive preprocessing (input " + args.input + ")");

  auto [train_all, test] = split_train_test(corpus, args.train_frac);
  SessionCorpus train = train_all;
  std::optional<SessionCorpus> valid;
  if (args.valid_frac > 0.0) {
    auto [fit, val] = split_train_test(train_all, 1.0 - args.valid_frac);
    train = std::move(fit);
    valid = std::move(val);
    // realign the test split with the post-carve training vocabulary
    test = project_corpus(train, test);
  }

  fs::create_directories(args.output);
  save_corpus(train, (fs::path(args.output) / "train.json").string());
  if (valid) save_corpus(*valid, (fs::path(args.output) / "valid.json").string());
  save_corpus(test, (fs::path(args.output) / "test.json").string());

  const auto stats = compute_stats(corpus);
  std::ofstream csv(fs::path(args.output) / "stats.csv");
  csv << "stat,value\n"
      << "users," << stats.users << '\n'
      << "items," << stats.items << '\n'
      << "sessions," << stats.sessions << '\n'
      << "avg_session_length," << stats.avg_session_len << '\n'
      << "sessions_per_user," << stats.sessions_per_user << '\n'
      << "train_sessions," << train.n_sessions() << '\n'
      << "valid_sessions," << (valid ? valid->n_sessions() : 0) << '\n'
      << "test_sessions," << test.n_sessions() << '\n';

  std::cout << "prepare idle_minutes=" << idle << " min_session_len=" << args.min_session_len
            << " min_user_sessions=" << args.min_user_sessions
            << " train_frac=" << args.train_frac << " valid_frac=" << args.valid_frac << '\n';
  std::cout << "users " << stats.users << ", items " << stats.items << ", sessions "
            << stats.sessions << ", avg session length " << stats.avg_session_len
            << ", sessions per user " << stats.sessions_per_user << '\n';
  std::cout << "train sessions " << train.n_sessions();
  if (valid) std::cout << ", valid sessions " << valid->n_sessions();
  std::cout << ", test sessions " << test.n_sessions() << '\n';
  std::cout << "wrote " << args.output << '\n';
  return kExitOk;
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::string data, out;
  TrainConfig cfg;
};

template <typename T>
int train_with(const TrainArgs& args) {
  auto train_corpus = load_corpus((fs::path(args.data) / "train.json").string());
  std::optional<SessionCorpus> valid;
  const auto valid_path = fs::path(args.data) / "valid.json";
  if (fs::exists(valid_path)) valid = load_corpus(valid_path.string());

  echo_config(std::cout, args.cfg);
  Trainer<T> trainer(args.cfg, train_corpus, valid ? &*valid : nullptr);
  std::cout << "instances " << trainer.num_instances() << '\n';

  std::ofstream log(args.out + ".log");
  log << "epoch,train_loss,valid_recall5\n";
  for (int e = 0; e < args.cfg.epochs; ++e) {
    auto entry = trainer.run_epoch();
    std::cout << "epoch " << entry.epoch << " loss " << entry.train_loss;
    log << entry.epoch << ',' << entry.train_loss << ',';
    if (entry.valid_recall5) {
      std::cout << " valid_recall@5 " << *entry.valid_recall5;
      log << *entry.valid_recall5;
    }
    std::cout << '\n';
    log << '\n';
  }
  save_checkpoint(args.out, args.cfg, trainer.params(), &trainer.optimizer(), trainer.epoch(),
                  trainer.rng_state());
  std::cout << "checkpoint " << args.out << '\n';
  return kExitOk;
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, baseline, out_csv, split = "test";
  std::vector<int> ks = {5, 10, 20};
  std::vector<std::string> breakdowns;
  int group_width = 10;
  bool last_click_only = false;
};

std::vector<TrainingInstance> eval_instances_for(const SessionCorpus& corpus, int max_hist,
                                                 int max_len, bool last_click_only) {
  auto instances = make_instances(corpus, static_cast<std::size_t>(max_hist),
                                  static_cast<std::size_t>(max_len), InstanceMode::evaluation);
  if (!last_click_only) return instances;
  // keep, per (user, session), the instance with the longest prefix: the
  // one predicting the session's final click
  std::map<std::pair<std::int32_t, std::int32_t>, TrainingInstance> best;
  for (auto& inst : instances) {
    auto key = std::make_pair(inst.user, inst.available_history);
    auto it = best.find(key);
    if (it == best.end() || inst.prefix.size() > it->second.prefix.size()) best[key] = inst;
  }
  std::vector<TrainingInstance> out;
  for (auto& [key, inst] : best) out.push_back(std::move(inst));
  return out;
}

void report_results(const EvalArgs& args, std::vector<RankedResult> results) {
  std::ostringstream csv;
  write_metrics_csv(csv, results, args.ks);
  for (const auto& name : args.breakdowns) {
    BreakdownAxis axis;
    if (name == "prefix_length") axis = BreakdownAxis::prefix_length;
    else if (name == "history_count") axis = BreakdownAxis::history_count;
    else if (name == "history_group") axis = BreakdownAxis::history_group;
    else throw ContractError("unknown breakdown axis: " + name);
    write_breakdown_csv(csv, breakdown({results}, axis, args.ks, args.group_width), false);
  }
  if (args.out_csv.empty() || args.out_csv == "-") {
    std::cout << csv.str();
  } else {
    std::ofstream os(args.out_csv);
    if (!os) throw IoError("cannot write metrics file: " + args.out_csv);
    os << csv.str();
    std::cout << "metrics " << args.out_csv << '\n';
  }
  std::cout << "instances " << results.size() << '\n';
  for (int k : args.ks)
    std::cout << "recall@" << k << ' ' << recall_at_k(results, k) << "  mrr@" << k << ' '
              << mrr_at_k(results, k) << '\n';
}

template <typename T>
int eval_checkpoint_with(const EvalArgs& args) {
  auto ck = load_checkpoint<T>(args.checkpoint);
  auto corpus = load_corpus((fs::path(args.data) / (args.split + ".json")).string());
  if (static_cast<std::int64_t>(corpus.n_items()) != ck.params.n_items ||
      static_cast<std::int64_t>(corpus.n_users()) != ck.params.n_users)
    throw DataError("checkpoint/data mismatch: checkpoint holds " +
                    std::to_string(ck.params.n_items) + " items / " +
                    std::to_string(ck.params.n_users) + " users, corpus has " +
                    std::to_string(corpus.n_items()) + " / " + std::to_string(corpus.n_users()));

  echo_config(std::cout, ck.cfg);
  auto instances = eval_instances_for(corpus, ck.cfg.max_hist_sessions, ck.cfg.max_session_len,
                                      args.last_click_only);
  if (instances.empty()) throw DataError("no evaluation instances in split " + args.split);
  int keep_topk = 0;
  for (int k : args.ks) keep_topk = std::max(keep_topk, k);
  auto results = evaluate_model(ck.params, ck.cfg, instances, keep_topk);
  report_results(args, std::move(results));
  return kExitOk;
}

int eval_baseline(const EvalArgs& args) {
  auto train_corpus = load_corpus((fs::path(args.data) / "train.json").string());
  auto corpus = load_corpus((fs::path(args.data) / (args.split + ".json")).string());
  TrainConfig defaults;
  auto instances = eval_instances_for(corpus, defaults.max_hist_sessions, defaults.max_session_len,
                                      args.last_click_only);
  if (instances.empty()) throw DataError("no evaluation instances in split " + args.split);

  std::optional<PopScorer> pop;
  std::optional<ItemKnnScorer> knn;
  if (args.baseline == "pop") pop.emplace(train_corpus);
  else if (args.baseline == "itemknn") knn.emplace(train_corpus);
  else throw ContractError("unknown baseline: " + args.baseline);

  std::vector<RankedResult> results;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto scores = pop ? pop->score(instances[i].prefix) : knn->score(instances[i].prefix);
    RankedResult r;
    r.instance = static_cast<std::int64_t>(i);
    r.rank = rank_of_label(scores, instances[i].label);
    r.prefix_len = static_cast<int>(instances[i].prefix.size());
    r.history_count = instances[i].available_history;
    results.push_back(std::move(r));
  }
  std::cout << "baseline " << args.baseline << '\n';
  report_results(args, std::move(results));
  return kExitOk;
}

// ---- gradcheck ------------------------------------------------------------------

struct GradcheckArgs {
  std::string scale = "micro";
  int seeds = 3;
  std::uint64_t seed = 1;
  int precision = 64;
  std::string inject_fault;
};

template <typename T>
int gradcheck_with(const GradcheckArgs& args) {
  if (args.scale != "micro") throw ContractError("unsupported gradcheck scale: " + args.scale);
  GradCheckOptions opts;
  if (args.precision == 32) {
    opts.tolerance = 1e-2;
    std::cerr << "warning: 32-bit mode loosens the gradient tolerance to 1e-2\n";
  }
  if (!args.inject_fault.empty()) {
    if (args.inject_fault != "gru-candidate-sign")
      throw ContractError("unknown fault: " + args.inject_fault);
    opts.fault = Fault::gru_candidate_sign;
  }
  bool all_pass = true;
  for (int s = 0; s < args.seeds; ++s) {
    opts.seed = args.seed + static_cast<std::uint64_t>(s);
    auto rep = run_micro_gradcheck<T>(opts);
    std::cout << "seed " << opts.seed << " max_rel_err " << rep.max_err << " tolerance "
              << rep.tolerance << (rep.pass ? " PASS" : " FAIL") << '\n';
    for (auto& p : rep.params) std::cout << "  " << p.name << ' ' << p.max_err << '\n';
    all_pass = all_pass && rep.pass;
  }
  if (!all_pass) {
    std::cerr << "gradient check failed\n";
    return kExitNumeric;
  }
  return kExitOk;
}

void apply_ablation_tokens(TrainConfig& cfg, const std::string& list) {
  std::istringstream in(list);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    if (tok == "no-user") cfg.ablation.use_user_embed = false;
    else if (tok == "no-attention") cfg.ablation.use_history_attention = false;
    else if (tok == "no-propagation") cfg.ablation.use_propagation = false;
    else if (!tok.empty()) throw ContractError("unknown ablation token: " + tok);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"session-aware recommender: per-user behavior graphs, gated graph propagation, "
               "cross-session attention"};
  app.require_subcommand(1);

  // prepare
  PrepareArgs prep;
  auto* prepare = app.add_subcommand("prepare", "split interaction logs into session corpora");
  prepare->add_option("--input", prep.input, "TSV interaction log")->required();
  prepare->add_option("--output", prep.output, "output directory")->required();
  prepare->add_option("--idle-minutes", prep.idle_minutes, "session idle threshold (minutes)");
  prepare->add_option("--min-session-len", prep.min_session_len, "drop shorter sessions");
  prepare->add_option("--min-user-sessions", prep.min_user_sessions, "drop less active users");
  prepare->add_option("--train-frac", prep.train_frac, "leading fraction of sessions for training");
  prepare->add_option("--valid-frac", prep.valid_frac,
                      "trailing fraction of train carved for validation");
  prepare->add_option("--drop-action", prep.drop_actions, "drop rows whose action column matches");
  prepare->add_option("--preset", prep.preset, "xing or reddit (reddit switches idle to 60)");

  // train
  TrainArgs tr;
  std::string tr_config, tr_preset, tr_ablation;
  std::map<std::string, std::string> tr_overrides;
  auto* train = app.add_subcommand("train", "train a model on a prepared corpus");
  train->add_option("--data", tr.data, "prepared corpus directory")->required();
  train->add_option("--out", tr.out, "checkpoint output path")->required();
  train->add_option("--config", tr_config, "key=value config file");
  train->add_option("--preset", tr_preset, "xing or reddit hyperparameters");
  train->add_option("--ablation", tr_ablation, "comma list: no-user,no-attention,no-propagation");
  auto add_override = [&](const char* flag, const char* key, const char* help) {
    train
        ->add_option_function<std::string>(
            flag, [&tr_overrides, key](const std::string& v) { tr_overrides[key] = v; }, help)
        ->take_last();
  };
  add_override("--dim-item", "dim_item", "item embedding dimension d");
  add_override("--dim-user", "dim_user", "user embedding dimension d'");
  add_override("--steps", "steps", "propagation rounds T");
  add_override("--max-hist-sessions", "max_hist_sessions", "history sessions fed to attention (M)");
  add_override("--max-session-len", "max_session_len", "current-session prefix cap");
  add_override("--lr", "lr", "Adam learning rate");
  add_override("--l2", "l2", "weight decay coefficient");
  add_override("--batch-size", "batch_size", "minibatch size");
  add_override("--epochs", "epochs", "training epochs");
  add_override("--batch-norm", "batch_norm", "true/false");
  add_override("--seed", "seed", "root random seed");
  add_override("--precision", "precision", "32 or 64");

  // eval
  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "score a corpus with a checkpoint or baseline");
  eval->add_option("--checkpoint", ev.checkpoint, "model checkpoint");
  eval->add_option("--baseline", ev.baseline, "pop or itemknn");
  eval->add_option("--data", ev.data, "prepared corpus directory")->required();
  eval->add_option("--split", ev.split, "corpus split to score (train/valid/test)");
  eval->add_option("--k", ev.ks, "K values for recall/mrr")->delimiter(',');
  eval->add_option("--breakdown", ev.breakdowns,
                   "bucket results by prefix_length, history_count, or history_group")
      ->delimiter(',');
  eval->add_option("--group-width", ev.group_width, "bucket width for history_group");
  eval->add_option("--out", ev.out_csv, "metrics CSV path ('-' for stdout)");
  eval->add_flag("--last-click-only", ev.last_click_only,
                 "score one instance per session (final click)");

  // gradcheck
  GradcheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the full model");
  gradcheck->add_option("--scale", gc.scale, "model scale (micro)");
  gradcheck->add_option("--seeds", gc.seeds, "number of seeds");
  gradcheck->add_option("--seed", gc.seed, "base seed");
  gradcheck->add_option("--precision", gc.precision, "32 or 64");
  gradcheck->add_option("--inject-fault", gc.inject_fault,
                        "deliberately corrupt a gradient (gru-candidate-sign)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*prepare) return cmd_prepare(prep);

    if (*train) {
      try {
        if (!tr_preset.empty()) apply_preset(tr.cfg, tr_preset);
        if (!tr_config.empty()) load_config_file(tr.cfg, tr_config);
        for (auto& [k, v] : tr_overrides) set_config_key(tr.cfg, k, v);
        if (!tr_ablation.empty()) apply_ablation_tokens(tr.cfg, tr_ablation);
      } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
      }
      return tr.cfg.precision == 64 ? train_with<double>(tr) : train_with<float>(tr);
    }

    if (*eval) {
      if (ev.checkpoint.empty() == ev.baseline.empty()) {
        std::cerr << "error: pass exactly one of --checkpoint or --baseline\n";
        return kExitUsage;
      }
      if (!ev.baseline.empty()) return eval_baseline(ev);
      return checkpoint_precision(ev.checkpoint) == 64 ? eval_checkpoint_with<double>(ev)
                                                       : eval_checkpoint_with<float>(ev);
    }

    if (*gradcheck) {
      if (gc.precision != 32 && gc.precision != 64) {
        std::cerr << "error: precision must be 32 or 64\n";
        return kExitUsage;
      }
      return gc.precision == 64 ? gradcheck_with<double>(gc) : gradcheck_with<float>(gc);
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kExitData;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
