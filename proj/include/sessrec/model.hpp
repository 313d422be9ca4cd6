#pragma once

// The model: item/user embeddings, user-conditioned gated graph
// propagation over the behavior graph, max-pooled historical session
// embeddings, scaled dot-product attention from the current session onto
// history, attentive readout into a unified user representation, and
// dot-product scoring over the item vocabulary.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sessrec/config.hpp"
#include "sessrec/errors.hpp"
#include "sessrec/graph.hpp"
#include "sessrec/rng.hpp"
#include "sessrec/tensor.hpp"

namespace sessrec {

// Debug hook for the gradient checker's mutation smoke test.
enum class Fault {
  none,
  gru_candidate_sign,  // flip the sign of the candidate term's gradient
};

// Every learnable tensor, plus batch-norm running statistics. The tensor
// set depends on the ablation flags: a variant owns exactly the parameters
// it uses, so optimizer and gradient checks always cover the whole set.
template <typename T>
struct ParameterSet {
  std::int64_t n_items = 0;
  std::int64_t n_users = 0;
  int dim_item = 0;
  int dim_user = 0;
  AblationFlags ablation;
  bool batch_norm = false;

  Tensor<T> item_embed;            // |V| x d
  Tensor<T> user_embed;            // |U| x d'        (user-embedding variants)
  Tensor<T> w_out, w_in;           // (d+d') x d, or d x d without user embedding
  Tensor<T> gru_wz, gru_wr, gru_wc;  // d x 2d
  Tensor<T> gru_uz, gru_ur, gru_uc;  // d x d
  Tensor<T> attn_q, attn_k, attn_v;  // d x d
  Tensor<T> read_w0;               // d
  Tensor<T> read_w1, read_w2;      // d x d
  Tensor<T> read_bias;             // d
  Tensor<T> fusion;                // d x (2d+d'), or d x 2d without user embedding
  Tensor<T> bn_gamma, bn_beta;     // d
  Tensor<T> bn_mean, bn_var;       // d, running statistics (not trained)

  // All parameters initialized Uniform(-1/sqrt(d), 1/sqrt(d)); batch-norm
  // scale/shift start at the usual (1, 0) identity transform.
  static ParameterSet init(std::int64_t n_items, std::int64_t n_users, const TrainConfig& cfg,
                           Rng rng) {
    ParameterSet ps;
    ps.n_items = n_items;
    ps.n_users = n_users;
    ps.dim_item = cfg.dim_item;
    ps.dim_user = cfg.dim_user;
    ps.ablation = cfg.ablation;
    ps.batch_norm = cfg.batch_norm;

    const auto d = static_cast<std::int64_t>(cfg.dim_item);
    const auto du = static_cast<std::int64_t>(cfg.dim_user);
    const T bound = T(1) / static_cast<T>(std::sqrt(static_cast<double>(d)));
    auto u = [&](Shape shape) { return Tensor<T>::uniform(std::move(shape), rng, -bound, bound, true); };

    ps.item_embed = u({n_items, d});
    if (ps.ablation.use_user_embed) ps.user_embed = u({n_users, du});
    if (ps.ablation.use_propagation) {
      const std::int64_t in_dim = ps.ablation.use_user_embed ? d + du : d;
      ps.w_out = u({in_dim, d});
      ps.w_in = u({in_dim, d});
      ps.gru_wz = u({d, 2 * d});
      ps.gru_wr = u({d, 2 * d});
      ps.gru_wc = u({d, 2 * d});
      ps.gru_uz = u({d, d});
      ps.gru_ur = u({d, d});
      ps.gru_uc = u({d, d});
    }
    if (ps.ablation.use_history_attention) {
      ps.attn_q = u({d, d});
      ps.attn_k = u({d, d});
      ps.attn_v = u({d, d});
    }
    ps.read_w0 = u({d});
    ps.read_w1 = u({d, d});
    ps.read_w2 = u({d, d});
    ps.read_bias = u({d});
    const std::int64_t fuse_in = ps.ablation.use_user_embed ? 2 * d + du : 2 * d;
    ps.fusion = u({d, fuse_in});
    if (ps.batch_norm) {
      ps.bn_gamma = Tensor<T>::full({d}, T(1));
      ps.bn_gamma.set_requires_grad(true);
      ps.bn_beta = Tensor<T>::zeros({d});
      ps.bn_beta.set_requires_grad(true);
      ps.bn_mean = Tensor<T>::zeros({d});
      ps.bn_var = Tensor<T>::full({d}, T(1));
    }
    return ps;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto push = [&](const char* name, const Tensor<T>& t) {
      if (t.defined()) out.emplace_back(name, t);
    };
    push("item_embed", item_embed);
    push("user_embed", user_embed);
    push("w_out", w_out);
    push("w_in", w_in);
    push("gru_wz", gru_wz);
    push("gru_wr", gru_wr);
    push("gru_wc", gru_wc);
    push("gru_uz", gru_uz);
    push("gru_ur", gru_ur);
    push("gru_uc", gru_uc);
    push("attn_q", attn_q);
    push("attn_k", attn_k);
    push("attn_v", attn_v);
    push("read_w0", read_w0);
    push("read_w1", read_w1);
    push("read_w2", read_w2);
    push("read_bias", read_bias);
    push("fusion", fusion);
    push("bn_gamma", bn_gamma);
    push("bn_beta", bn_beta);
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_buffers() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    if (bn_mean.defined()) out.emplace_back("bn_mean", bn_mean);
    if (bn_var.defined()) out.emplace_back("bn_var", bn_var);
    return out;
  }

  std::vector<Tensor<T>> trainables() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }
};

// ---- propagation ---------------------------------------------------------

// One aggregation round: every node gathers its outgoing- and
// incoming-weighted neighbor states (optionally concatenated with the user
// embedding), projected through w_out / w_in. Returns n x 2d.
template <typename T>
Tensor<T> aggregate_neighbors(Tape<T>& tape, const Tensor<T>& adj_out, const Tensor<T>& adj_in,
                              const Tensor<T>& states, const Tensor<T>* user_row,
                              const ParameterSet<T>& ps) {
  Tensor<T> x = states;
  if (user_row != nullptr) x = tape.concat_cols(states, tape.repeat_rows(*user_row, states.rows()));
  auto a_out = tape.matmul(adj_out, tape.matmul(x, ps.w_out));
  auto a_in = tape.matmul(adj_in, tape.matmul(x, ps.w_in));
  return tape.concat_cols(a_out, a_in);
}

// Gated update: update/reset gates and candidate state, blended with the
// previous node states.
template <typename T>
Tensor<T> gru_node_update(Tape<T>& tape, const Tensor<T>& states, const Tensor<T>& agg,
                          const ParameterSet<T>& ps, Fault fault = Fault::none) {
  auto z = tape.sigmoid(tape.add(tape.matmul(agg, ps.gru_wz, false, true),
                                 tape.matmul(states, ps.gru_uz, false, true)));
  auto r = tape.sigmoid(tape.add(tape.matmul(agg, ps.gru_wr, false, true),
                                 tape.matmul(states, ps.gru_ur, false, true)));
  auto cand_pre = tape.add(tape.matmul(agg, ps.gru_wc, false, true),
                           tape.matmul(tape.mul(r, states), ps.gru_uc, false, true));
  auto cand = tape.tanh(cand_pre);
  if (fault == Fault::gru_candidate_sign) cand = tape.grad_scaled_identity(cand, T(-1));
  return tape.add(tape.sub(states, tape.mul(z, states)), tape.mul(z, cand));
}

// T rounds of aggregate + gated update from the item embeddings. With
// propagation disabled (or T = 0) the raw embeddings pass through.
template <typename T>
Tensor<T> propagate(Tape<T>& tape, const BehaviorGraph& g, std::int32_t user,
                    const ParameterSet<T>& ps, int steps, Fault fault = Fault::none) {
  Tensor<T> h = tape.gather_rows(ps.item_embed, g.nodes);
  if (!ps.ablation.use_propagation || steps == 0) return h;

  std::vector<T> out_vals(g.adj_out.begin(), g.adj_out.end());
  std::vector<T> in_vals(g.adj_in.begin(), g.adj_in.end());
  auto adj_out = Tensor<T>::from({g.n, g.n}, std::move(out_vals));
  auto adj_in = Tensor<T>::from({g.n, g.n}, std::move(in_vals));

  Tensor<T> user_row;
  if (ps.ablation.use_user_embed) user_row = tape.gather_rows(ps.user_embed, {user});
  const Tensor<T>* user_ptr = ps.ablation.use_user_embed ? &user_row : nullptr;

  for (int t = 0; t < steps; ++t) {
    auto agg = aggregate_neighbors(tape, adj_out, adj_in, h, user_ptr, ps);
    h = gru_node_update(tape, h, agg, ps, fault);
  }
  return h;
}

// ---- history pooling and attention ----------------------------------------

// Column-wise max over each history session's node states; one row per
// history session.
template <typename T>
Tensor<T> pool_history(Tape<T>& tape, const Tensor<T>& states,
                       const std::vector<std::vector<std::int32_t>>& hist_seqs) {
  if (hist_seqs.empty()) throw ContractError("pool_history: no history sessions");
  std::vector<Tensor<T>> rows;
  rows.reserve(hist_seqs.size());
  for (const auto& seq : hist_seqs)
    rows.push_back(tape.max_reduce_rows(tape.gather_rows(states, seq)));
  return tape.concat_rows(rows);
}

template <typename T>
struct AttentionResult {
  Tensor<T> h_prime;  // m x d current-session states after history fusion
  Tensor<T> weights;  // m x n_hist attention rows; undefined without history
};

// Current-session states query the pooled history sessions; the attended
// history is added back onto the current states. With no history (or the
// attention ablation) the current states pass through unchanged.
template <typename T>
AttentionResult<T> history_attention(Tape<T>& tape, const Tensor<T>& h_cur, const Tensor<T>* hist,
                                     const ParameterSet<T>& ps) {
  if (!ps.ablation.use_history_attention || hist == nullptr) return {h_cur, {}};
  auto q = tape.relu(tape.matmul(h_cur, ps.attn_q));
  auto k = tape.relu(tape.matmul(*hist, ps.attn_k));
  auto v = tape.relu(tape.matmul(*hist, ps.attn_v));
  const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(ps.dim_item)));
  auto weights = tape.softmax_rows(tape.scalar_mul(tape.matmul(q, k, false, true), scale));
  auto attended = tape.matmul(weights, v);
  return {tape.add(attended, h_cur), weights};
}

// ---- batch normalization ---------------------------------------------------

// Feature-wise normalization over the rows of the current-session state
// matrix, with learned scale/shift. Training uses batch statistics and
// refreshes the running buffers; evaluation uses the running statistics.
template <typename T>
Tensor<T> batch_norm_rows(Tape<T>& tape, const Tensor<T>& x, ParameterSet<T>& ps, bool training,
                          T momentum = T(0.1), T eps = T(1e-5)) {
  Tensor<T> xhat;
  if (training) {
    auto mean = tape.mean_rows(x);
    auto centered = tape.sub(x, mean);
    auto var = tape.mean_rows(tape.mul(centered, centered));
    xhat = tape.mul(centered, tape.rsqrt(tape.scalar_add(var, eps)));
    auto& rm = ps.bn_mean.mut_value();
    auto& rv = ps.bn_var.mut_value();
    for (std::size_t j = 0; j < rm.size(); ++j) {
      rm[j] = (T(1) - momentum) * rm[j] + momentum * mean.value()[j];
      rv[j] = (T(1) - momentum) * rv[j] + momentum * var.value()[j];
    }
  } else {
    std::vector<T> inv(ps.bn_var.value().size());
    for (std::size_t j = 0; j < inv.size(); ++j)
      inv[j] = T(1) / std::sqrt(ps.bn_var.value()[j] + eps);
    auto mean_c = Tensor<T>::from({static_cast<std::int64_t>(inv.size())},
                                  std::vector<T>(ps.bn_mean.value()));
    auto inv_c = Tensor<T>::vec(std::move(inv));
    xhat = tape.mul(tape.sub(x, mean_c), inv_c);
  }
  return tape.add(tape.mul(xhat, ps.bn_gamma), ps.bn_beta);
}

// ---- readout ----------------------------------------------------------------

template <typename T>
struct UnifiedRep {
  Tensor<T> local;    // 1 x d, last current-session state
  Tensor<T> global;   // 1 x d, attention-weighted sum over current states
  Tensor<T> dynamic;  // 1 x 2d, global || local
  Tensor<T> unified;  // 1 x d
  Tensor<T> alpha;    // m x 1 readout weights (not softmax-normalized)
};

// z_l = last state; alpha_i = w0 . sigmoid(W1 z_l + W2 h_i + b);
// z_g = sum_i alpha_i h_i; z_u = fusion * (z_g || z_l [|| e_u]).
template <typename T>
UnifiedRep<T> unified_representation(Tape<T>& tape, const Tensor<T>& h_prime,
                                     const Tensor<T>* user_row, const ParameterSet<T>& ps) {
  const std::int64_t m = h_prime.rows();
  if (m < 1) throw ContractError("unified_representation: empty current session");
  UnifiedRep<T> rep;
  rep.local = tape.gather_rows(h_prime, {static_cast<std::int32_t>(m - 1)});
  auto base = tape.add(tape.matmul(rep.local, ps.read_w1, false, true), ps.read_bias);
  auto inner = tape.add(tape.matmul(h_prime, ps.read_w2, false, true), base);
  rep.alpha = tape.matmul(tape.sigmoid(inner), ps.read_w0, false, true);  // m x 1
  rep.global = tape.matmul(rep.alpha, h_prime, true, false);              // 1 x d
  rep.dynamic = tape.concat_cols(rep.global, rep.local);
  Tensor<T> fused_in = rep.dynamic;
  if (ps.ablation.use_user_embed) {
    if (user_row == nullptr) throw ContractError("unified_representation: missing user embedding");
    fused_in = tape.concat_cols(rep.dynamic, *user_row);
  }
  rep.unified = tape.matmul(fused_in, ps.fusion, false, true);
  return rep;
}

// ---- scoring and loss --------------------------------------------------------

template <typename T>
Tensor<T> score_items(Tape<T>& tape, const Tensor<T>& unified, const ParameterSet<T>& ps) {
  return tape.matmul(unified, ps.item_embed, false, true);  // 1 x |V|
}

// Softmax over the scores, then the summed binary cross-entropy against the
// one-hot label over the whole vocabulary. Log arguments clamp at 1e-12.
template <typename T>
Tensor<T> bce_softmax_loss(Tape<T>& tape, const Tensor<T>& scores, std::int32_t label) {
  const std::int64_t v = scores.numel();
  if (label < 0 || label >= v)
    throw ContractError("loss: label " + std::to_string(label) + " outside [0, " +
                        std::to_string(v) + ")");
  std::vector<T> onehot(static_cast<std::size_t>(v), T(0));
  onehot[static_cast<std::size_t>(label)] = T(1);
  auto y = Tensor<T>::from({1, v}, std::move(onehot));
  auto y_comp = tape.scalar_add(tape.scalar_mul(y, T(-1)), T(1));

  auto p = tape.softmax_rows(scores);
  auto pos = tape.sum_all(tape.mul(tape.log_clamped(p), y));
  auto one_minus_p = tape.scalar_add(tape.scalar_mul(p, T(-1)), T(1));
  auto neg = tape.sum_all(tape.mul(tape.log_clamped(one_minus_p), y_comp));
  return tape.scalar_mul(tape.add(pos, neg), T(-1));
}

// ---- full forward --------------------------------------------------------------

// Scores for one instance: behavior graph -> propagation -> history pooling
// and attention -> optional batch norm -> readout -> dot-product scores.
template <typename T>
Tensor<T> forward_scores(Tape<T>& tape, ParameterSet<T>& ps, const TrainConfig& cfg,
                         const BehaviorGraph& g, std::int32_t user, bool training,
                         Fault fault = Fault::none) {
  auto states = propagate(tape, g, user, ps, cfg.steps, fault);

  auto h_cur = tape.gather_rows(states, g.cur_node_seq);
  Tensor<T> hist;
  const Tensor<T>* hist_ptr = nullptr;
  if (ps.ablation.use_history_attention && !g.hist_node_seqs.empty()) {
    hist = pool_history(tape, states, g.hist_node_seqs);
    hist_ptr = &hist;
  }
  auto attn = history_attention(tape, h_cur, hist_ptr, ps);

  Tensor<T> h_prime = attn.h_prime;
  if (ps.batch_norm) h_prime = batch_norm_rows(tape, h_prime, ps, training);

  Tensor<T> user_row;
  const Tensor<T>* user_ptr = nullptr;
  if (ps.ablation.use_user_embed) {
    user_row = tape.gather_rows(ps.user_embed, {user});
    user_ptr = &user_row;
  }
  auto rep = unified_representation(tape, h_prime, user_ptr, ps);
  return score_items(tape, rep.unified, ps);
}

}  // namespace sessrec
