#pragma once

// Minibatch training loop, model evaluation, and binary checkpoints.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "sessrec/adam.hpp"
#include "sessrec/config.hpp"
#include "sessrec/dataset.hpp"
#include "sessrec/graph.hpp"
#include "sessrec/metrics.hpp"
#include "sessrec/model.hpp"

namespace sessrec {

// Scores every instance with gradients off and ranks the label.
// `keep_topk` > 0 also records the top-K item lists.
template <typename T>
std::vector<RankedResult> evaluate_model(ParameterSet<T>& ps, const TrainConfig& cfg,
                                         const std::vector<TrainingInstance>& instances,
                                         int keep_topk = 0) {
  std::vector<RankedResult> out;
  out.reserve(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    auto g = build_graph(inst);
    Tape<T> tape;
    tape.set_recording(false);
    auto scores = forward_scores(tape, ps, cfg, g, inst.user, /*training=*/false);
    RankedResult r;
    r.instance = static_cast<std::int64_t>(i);
    r.rank = rank_of_label(scores.value(), inst.label);
    r.prefix_len = static_cast<int>(inst.prefix.size());
    r.history_count = inst.available_history;
    if (keep_topk > 0) r.topk = top_k_items(scores.value(), keep_topk);
    out.push_back(std::move(r));
  }
  return out;
}

template <typename T>
struct LoadedCheckpoint;

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> valid_recall5;
};

template <typename T>
class Trainer {
 public:
  Trainer(TrainConfig cfg, const SessionCorpus& train, const SessionCorpus* valid = nullptr)
      : cfg_(std::move(cfg)),
        instances_(make_instances(train, static_cast<std::size_t>(cfg_.max_hist_sessions),
                                  static_cast<std::size_t>(cfg_.max_session_len))),
        params_(ParameterSet<T>::init(static_cast<std::int64_t>(train.n_items()),
                                      static_cast<std::int64_t>(train.n_users()), cfg_,
                                      Rng(cfg_.seed).split("init"))),
        opt_(std::make_unique<Adam<T>>(params_.trainables(), static_cast<T>(cfg_.lr), T(0.9),
                                       T(0.999), T(1e-8), static_cast<T>(cfg_.l2))),
        rng_(Rng(cfg_.seed).split("shuffle")) {
    if (instances_.empty()) throw ContractError("train: corpus yields no training instances");
    graphs_.reserve(instances_.size());
    for (const auto& inst : instances_) graphs_.push_back(build_graph(inst));
    if (valid != nullptr)
      valid_instances_ = make_instances(*valid, static_cast<std::size_t>(cfg_.max_hist_sessions),
                                        static_cast<std::size_t>(cfg_.max_session_len),
                                        InstanceMode::evaluation);
  }

  EpochLog run_epoch() {
    std::vector<std::size_t> order(instances_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng_.shuffle(order);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    const auto bs = static_cast<std::size_t>(cfg_.batch_size);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const auto end = std::min(order.size(), start + bs);
      Tape<T> tape;
      double lv = 0.0;
      Tensor<T> batch_loss;
      try {
        std::vector<Tensor<T>> losses;
        losses.reserve(end - start);
        for (std::size_t k = start; k < end; ++k) {
          const auto& inst = instances_[order[k]];
          auto scores =
              forward_scores(tape, params_, cfg_, graphs_[order[k]], inst.user, /*training=*/true);
          losses.push_back(bce_softmax_loss(tape, scores, inst.label));
        }
        Tensor<T> total = losses[0];
        for (std::size_t k = 1; k < losses.size(); ++k) total = tape.add(total, losses[k]);
        batch_loss = tape.scalar_mul(total, T(1) / static_cast<T>(losses.size()));
        lv = static_cast<double>(batch_loss.item());
      } catch (const NumericError&) {
        lv = std::numeric_limits<double>::quiet_NaN();
      }
      if (!std::isfinite(lv)) {
        const char* culprit = tape.first_nonfinite();
        throw NumericError(std::string("training diverged: first non-finite tensor came from op '") +
                           (culprit ? culprit : "unknown") + "' in epoch " +
                           std::to_string(epoch_ + 1));
      }
      tape.backward(batch_loss);
      opt_->step();
      loss_sum += lv;
      ++batches;
    }
    ++epoch_;

    EpochLog log;
    log.epoch = epoch_;
    log.train_loss = loss_sum / static_cast<double>(batches);
    if (!valid_instances_.empty()) {
      auto results = evaluate_model(params_, cfg_, valid_instances_);
      log.valid_recall5 = recall_at_k(results, 5);
    }
    return log;
  }

  ParameterSet<T>& params() { return params_; }
  const TrainConfig& config() const { return cfg_; }
  Adam<T>& optimizer() { return *opt_; }
  int epoch() const { return epoch_; }
  std::uint64_t rng_state() const { return rng_.state(); }
  std::size_t num_instances() const { return instances_.size(); }

  // Resume from a loaded checkpoint: parameter and buffer values are copied
  // into this trainer's tensors, optimizer moments and RNG state restored.
  void load_state(const LoadedCheckpoint<T>& ck);

 private:
  TrainConfig cfg_;
  std::vector<TrainingInstance> instances_;
  std::vector<BehaviorGraph> graphs_;
  std::vector<TrainingInstance> valid_instances_;
  ParameterSet<T> params_;
  std::unique_ptr<Adam<T>> opt_;
  Rng rng_;
  int epoch_ = 0;
};

// ---- checkpoints -------------------------------------------------------------
//
// Binary little-endian layout (see README for the field-by-field schema):
// magic, scalar width, config text, vocabulary sizes, named parameter
// tensors, named buffers, Adam moments, epoch counter, RNG state.

namespace detail {

constexpr char kCkptMagic[8] = {'S', 'R', 'E', 'C', 'C', 'K', 'P', '1'};

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
template <typename V>
void write_pod(std::ostream& os, V v) {
  write_bytes(os, &v, sizeof(V));
}
inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

inline void read_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is) throw DataError(std::string("checkpoint: truncated while reading ") + what);
}
template <typename V>
V read_pod(std::istream& is, const char* what) {
  V v;
  read_bytes(is, &v, sizeof(V), what);
  return v;
}
inline std::string read_string(std::istream& is, const char* what) {
  const auto n = read_pod<std::uint32_t>(is, what);
  std::string s(n, '\0');
  read_bytes(is, s.data(), n, what);
  return s;
}

template <typename T>
void write_tensor(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  write_string(os, name);
  write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) write_pod<std::int64_t>(os, d);
  write_bytes(os, t.value().data(), t.value().size() * sizeof(T));
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const TrainConfig& cfg, const ParameterSet<T>& ps,
                     Adam<T>* opt, std::int64_t epoch, std::uint64_t rng_state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path);
  detail::write_bytes(os, detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(sizeof(T)));

  std::ostringstream cfgtext;
  for (auto& [k, v] : config_to_kv(cfg)) cfgtext << k << '=' << v << '\n';
  detail::write_string(os, cfgtext.str());

  detail::write_pod<std::int64_t>(os, ps.n_items);
  detail::write_pod<std::int64_t>(os, ps.n_users);

  const auto params = ps.named_params();
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (auto& [name, t] : params) detail::write_tensor(os, name, t);
  const auto buffers = ps.named_buffers();
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(buffers.size()));
  for (auto& [name, t] : buffers) detail::write_tensor(os, name, t);

  detail::write_pod<std::uint8_t>(os, opt != nullptr ? 1 : 0);
  if (opt != nullptr) {
    detail::write_pod<std::int64_t>(os, opt->step_count());
    for (std::size_t k = 0; k < params.size(); ++k) {
      detail::write_bytes(os, opt->moment1(k).data(), opt->moment1(k).size() * sizeof(T));
      detail::write_bytes(os, opt->moment2(k).data(), opt->moment2(k).size() * sizeof(T));
    }
  }
  detail::write_pod<std::int64_t>(os, epoch);
  detail::write_pod<std::uint64_t>(os, rng_state);
  if (!os) throw IoError("failed while writing checkpoint: " + path);
}

template <typename T>
struct LoadedCheckpoint {
  TrainConfig cfg;
  ParameterSet<T> params;
  bool has_optimizer = false;
  std::vector<std::vector<T>> m, v;
  std::int64_t step_count = 0;
  std::int64_t epoch = 0;
  std::uint64_t rng_state = 0;
};

// Scalar width recorded in a checkpoint file (4 or 8), for dispatching the
// right template instantiation before a full load.
inline int checkpoint_precision(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  detail::read_bytes(is, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
    throw DataError("checkpoint " + path + ": bad magic bytes");
  return detail::read_pod<std::uint8_t>(is, "precision") == 4 ? 32 : 64;
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  detail::read_bytes(is, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
    throw DataError("checkpoint " + path + ": bad magic bytes");
  const auto width = detail::read_pod<std::uint8_t>(is, "precision");
  if (width != sizeof(T))
    throw ContractError("checkpoint " + path + " stores " + std::to_string(width * 8) +
                        "-bit scalars; reload with the matching precision");

  LoadedCheckpoint<T> out;
  const std::string cfgtext = detail::read_string(is, "config");
  std::istringstream cfgin(cfgtext);
  std::string line;
  while (std::getline(cfgin, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    set_config_key(out.cfg, line.substr(0, eq), line.substr(eq + 1));
  }

  const auto n_items = detail::read_pod<std::int64_t>(is, "n_items");
  const auto n_users = detail::read_pod<std::int64_t>(is, "n_users");
  out.params = ParameterSet<T>::init(n_items, n_users, out.cfg, Rng(0));

  auto read_into = [&](std::vector<std::pair<std::string, Tensor<T>>> expected, const char* kind) {
    const auto count = detail::read_pod<std::uint32_t>(is, kind);
    if (count != expected.size())
      throw DataError("checkpoint " + path + ": expected " + std::to_string(expected.size()) +
                      " " + kind + ", found " + std::to_string(count));
    for (auto& [name, t] : expected) {
      const auto fname = detail::read_string(is, kind);
      if (fname != name)
        throw DataError("checkpoint " + path + ": tensor order mismatch, expected " + name +
                        ", found " + fname);
      const auto rank = detail::read_pod<std::uint8_t>(is, "rank");
      Shape shape(rank);
      for (auto& d : shape) d = detail::read_pod<std::int64_t>(is, "dim");
      if (shape != t.shape())
        throw DataError("checkpoint " + path + ": shape mismatch for " + name + ": file " +
                        shape_str(shape) + " vs model " + shape_str(t.shape()));
      detail::read_bytes(is, t.mut_value().data(), t.value().size() * sizeof(T), name.c_str());
    }
  };
  read_into(out.params.named_params(), "parameters");
  read_into(out.params.named_buffers(), "buffers");

  out.has_optimizer = detail::read_pod<std::uint8_t>(is, "optimizer flag") != 0;
  if (out.has_optimizer) {
    out.step_count = detail::read_pod<std::int64_t>(is, "step count");
    for (auto& [name, t] : out.params.named_params()) {
      std::vector<T> m(t.value().size()), v(t.value().size());
      detail::read_bytes(is, m.data(), m.size() * sizeof(T), "moment1");
      detail::read_bytes(is, v.data(), v.size() * sizeof(T), "moment2");
      out.m.push_back(std::move(m));
      out.v.push_back(std::move(v));
    }
  }
  out.epoch = detail::read_pod<std::int64_t>(is, "epoch");
  out.rng_state = detail::read_pod<std::uint64_t>(is, "rng state");
  return out;
}

template <typename T>
void Trainer<T>::load_state(const LoadedCheckpoint<T>& ck) {
  auto mine = params_.named_params();
  auto theirs = ck.params.named_params();
  if (mine.size() != theirs.size())
    throw ContractError("load_state: checkpoint does not match the model configuration");
  for (std::size_t k = 0; k < mine.size(); ++k) {
    if (mine[k].first != theirs[k].first || mine[k].second.shape() != theirs[k].second.shape())
      throw ContractError("load_state: mismatch on parameter " + mine[k].first);
    mine[k].second.mut_value() = theirs[k].second.value();
  }
  auto my_buf = params_.named_buffers();
  auto their_buf = ck.params.named_buffers();
  if (my_buf.size() != their_buf.size())
    throw ContractError("load_state: buffer set does not match");
  for (std::size_t k = 0; k < my_buf.size(); ++k)
    my_buf[k].second.mut_value() = their_buf[k].second.value();
  if (ck.has_optimizer) {
    for (std::size_t k = 0; k < ck.m.size(); ++k) {
      opt_->moment1(k) = ck.m[k];
      opt_->moment2(k) = ck.v[k];
    }
    opt_->set_step_count(ck.step_count);
  }
  epoch_ = static_cast<int>(ck.epoch);
  rng_.set_state(ck.rng_state);
}

}  // namespace sessrec
