#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "prefopt/data.hpp"
#include "prefopt/error.hpp"
#include "prefopt/gradients.hpp"
#include "prefopt/io.hpp"
#include "prefopt/losses.hpp"
#include "prefopt/normstate.hpp"
#include "prefopt/policy.hpp"

namespace prefopt {

struct TrainConfig {
  LossConfig loss;
  double learning_rate = 1.0;
  std::size_t steps = 500;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::size_t eval_every = 50;
  std::size_t sample_max_len = 64;
  double ema_decay = EmaNormState::kDefaultDecay;

  void validate() const {
    loss.validate();
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
      throw InputDomainError("learning rate must be finite and >= 0");
    if (steps < 1) throw InputDomainError("steps must be >= 1");
    if (batch_size < 1) throw InputDomainError("batch size must be >= 1");
    if (eval_every < 1) throw InputDomainError("eval_every must be >= 1");
    if (sample_max_len < 1) throw InputDomainError("sample_max_len must be >= 1");
  }
};

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;
  double chosen_avg_lp = 0.0;
  double rejected_avg_lp = 0.0;
  double margin_raw = 0.0;
  double margin_norm = 0.0;
  double reward_acc = 0.0;
  std::optional<double> sample_len;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

struct TrainResult {
  BigramPolicy policy;
  EmaNormState norm_state;
  std::vector<MetricsRow> metrics;
};

// Independent streams derived from one user seed.
enum class Stream : std::uint64_t { batches = 1, sampling = 2 };

inline Rng make_stream(std::uint64_t seed, Stream s) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s)};
  return Rng(seq);
}

/// Yields batches from a seeded permutation, reshuffling at every epoch
/// boundary; a batch may straddle two epochs.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(make_stream(seed, Stream::batches)) {
    if (n == 0) throw InputDomainError("cannot sample batches from an empty dataset");
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t batch_size) {
    std::vector<std::size_t> out;
    out.reserve(batch_size);
    while (out.size() < batch_size) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t pos_ = 0;
};

// Strict wins count 1, ties 0.5.
inline double win_credit(double reward_w, double reward_l) {
  if (reward_w > reward_l) return 1.0;
  if (reward_w == reward_l) return 0.5;
  return 0.0;
}

struct EvalConfig {
  std::uint64_t seed = 0;
  std::size_t sample_max_len = 64;
};

struct EvalSummary {
  double reward_accuracy = 0.0;
  double mean_chosen_avg_lp = 0.0;
  double mean_rejected_avg_lp = 0.0;
  double mean_sampled_length = 0.0;

  friend bool operator==(const EvalSummary&, const EvalSummary&) = default;
};

// One ancestral sample per prompt from a fresh sampling stream.
inline double mean_sampled_length(const BigramPolicy& policy, const Dataset& ds, const EvalConfig& cfg) {
  if (ds.records.empty()) throw InputDomainError("evaluate needs a non-empty dataset");
  Rng rng = make_stream(cfg.seed, Stream::sampling);
  double total = 0.0;
  for (const auto& r : ds.records)
    total += static_cast<double>(sample(policy, r.prompt, cfg.sample_max_len, rng).size());
  return total / static_cast<double>(ds.records.size());
}

inline EvalSummary evaluate(const BigramPolicy& policy, const Dataset& ds, const EvalConfig& cfg) {
  if (ds.records.empty()) throw InputDomainError("evaluate needs a non-empty dataset");
  EvalSummary s;
  const double n = static_cast<double>(ds.records.size());
  for (const auto& r : ds.records) {
    auto sp = score_pair(policy, r);
    s.reward_accuracy += win_credit(sp.avg_lp_w, sp.avg_lp_l);
    s.mean_chosen_avg_lp += sp.avg_lp_w;
    s.mean_rejected_avg_lp += sp.avg_lp_l;
  }
  s.reward_accuracy /= n;
  s.mean_chosen_avg_lp /= n;
  s.mean_rejected_avg_lp /= n;
  s.mean_sampled_length = mean_sampled_length(policy, ds, cfg);
  return s;
}

/// Mini-batch gradient descent from a zero (uniform) policy. For LMPO with
/// Z-scoring, each step first folds the batch margins into the EMA state,
/// then computes loss and gradient against the updated statistics.
inline TrainResult train(const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.records.empty()) throw InputDomainError("training dataset is empty");
  if (cfg.batch_size > ds.records.size())
    throw InputDomainError("batch size exceeds dataset size");
  for (const auto& r : ds.records) validate_record(r, ds.vocab_size);

  TrainResult res{BigramPolicy(ds.vocab_size), EmaNormState(cfg.ema_decay), {}};
  res.metrics.reserve(cfg.steps);
  const bool is_dpo = cfg.loss.kind == LossKind::dpo;
  const bool zscore = cfg.loss.kind == LossKind::lmpo && cfg.loss.lmpo.use_zscore;
  const std::optional<BigramPolicy> ref = is_dpo ? std::optional(res.policy) : std::nullopt;
  const BigramPolicy* ref_ptr = ref ? &*ref : nullptr;
  const EvalConfig eval_cfg{cfg.seed, cfg.sample_max_len};

  BatchSampler sampler(ds.records.size(), cfg.seed);
  std::vector<PreferenceRecord> batch;
  std::vector<double> margins;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    batch.clear();
    for (std::size_t i : sampler.next(cfg.batch_size)) batch.push_back(ds.records[i]);

    MetricsRow row;
    row.step = step;
    margins.clear();
    for (const auto& r : batch) {
      auto sp = score_pair(res.policy, r);
      row.chosen_avg_lp += sp.avg_lp_w;
      row.rejected_avg_lp += sp.avg_lp_l;
      row.reward_acc += win_credit(sp.avg_lp_w, sp.avg_lp_l);
      margins.push_back(pair_margin(sp, cfg.loss.lmpo));
    }
    if (zscore) res.norm_state.update(margins);
    for (double m : margins) {
      row.margin_raw += m;
      row.margin_norm += zscore ? res.norm_state.normalize(m) : m;
    }
    const double n = static_cast<double>(batch.size());
    row.chosen_avg_lp /= n;
    row.rejected_avg_lp /= n;
    row.reward_acc /= n;
    row.margin_raw /= n;
    row.margin_norm /= n;

    row.loss = batch_loss(res.policy, ref_ptr, batch, cfg.loss, res.norm_state);
    auto grad = batch_grad(res.policy, ref_ptr, batch, cfg.loss, res.norm_state);
    if (!std::isfinite(row.loss) || !grad.all_finite())
      throw NumericError("non-finite loss or gradient at step " + std::to_string(step), step);

    if (step % cfg.eval_every == 0 || step == cfg.steps)
      row.sample_len = mean_sampled_length(res.policy, ds, eval_cfg);

    res.policy.logits().add_scaled(grad, -cfg.learning_rate);
    if (!res.policy.logits().all_finite())
      throw NumericError("non-finite parameters after step " + std::to_string(step), step);
    res.metrics.push_back(row);
  }
  return res;
}

inline constexpr std::string_view kMetricsHeader =
    "step,loss,chosen_avg_lp,rejected_avg_lp,margin_raw,margin_norm,reward_acc,sample_len";

inline std::string metrics_row_csv(const MetricsRow& r) {
  std::string s = std::to_string(r.step);
  for (double v : {r.loss, r.chosen_avg_lp, r.rejected_avg_lp, r.margin_raw, r.margin_norm, r.reward_acc})
    s += "," + format_double(v);
  s += ",";
  if (r.sample_len) s += format_double(*r.sample_len);
  return s;
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const auto& r : rows) out += metrics_row_csv(r) + '\n';
  return out;
}

// Checkpoint layout:
//   # prefopt-ckpt-v1 vocab=<V>
//   ema initialized=<0|1> mean=<v> std=<v> decay=<v> epsilon=<v> step=<n>
//   <V lines of V space-separated logits>
struct Checkpoint {
  BigramPolicy policy;
  EmaNormState norm_state;
};

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  const auto& st = ck.norm_state;
  const std::size_t V = ck.policy.vocab_size();
  std::string out = "# prefopt-ckpt-v1 vocab=" + std::to_string(V) + "\n";
  out += "ema initialized=" + std::string(st.initialized() ? "1" : "0") +
         " mean=" + format_double(st.mean()) + " std=" + format_double(st.std()) +
         " decay=" + format_double(st.decay()) + " epsilon=" + format_double(st.epsilon()) +
         " step=" + std::to_string(st.step()) + "\n";
  for (std::size_t r = 0; r < V; ++r) {
    auto row = ck.policy.logits().row(r);
    for (std::size_t c = 0; c < V; ++c) {
      if (c) out += ' ';
      out += format_double(row[c]);
    }
    out += '\n';
  }
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view text) {
  auto lines = split_lines(text);
  constexpr std::string_view prefix = "# prefopt-ckpt-v1 vocab=";
  if (lines.empty() || !lines[0].starts_with(prefix)) throw ParseError("bad checkpoint header", 1);
  std::size_t V = 0;
  if (!parse_int(lines[0].substr(prefix.size()), V) || V < 2) throw ParseError("bad vocab size", 1);
  if (lines.size() != V + 2) throw ParseError("expected " + std::to_string(V) + " logit rows", lines.size());

  auto fields = split_ws(lines[1]);
  if (fields.size() != 7 || fields[0] != "ema") throw ParseError("bad ema line", 2);
  auto value_of = [&](std::size_t i, std::string_view key) {
    auto f = fields[i];
    if (!f.starts_with(key) || f.size() <= key.size() || f[key.size()] != '=')
      throw ParseError("expected field '" + std::string(key) + "'", 2);
    return f.substr(key.size() + 1);
  };
  int init = 0;
  double mean = 0, sd = 0, decay = 0, eps = 0;
  std::size_t step = 0;
  if (!parse_int(value_of(1, "initialized"), init) || (init != 0 && init != 1) ||
      !parse_double(value_of(2, "mean"), mean) || !parse_double(value_of(3, "std"), sd) ||
      !parse_double(value_of(4, "decay"), decay) || !parse_double(value_of(5, "epsilon"), eps) ||
      !parse_int(value_of(6, "step"), step))
    throw ParseError("bad ema field value", 2);

  Table logits(V);
  for (std::size_t r = 0; r < V; ++r) {
    auto vals = split_ws(lines[r + 2]);
    if (vals.size() != V) throw ParseError("expected " + std::to_string(V) + " values", r + 3);
    for (std::size_t c = 0; c < V; ++c) {
      if (!parse_double(vals[c], logits(r, c)) || !std::isfinite(logits(r, c)))
        throw ParseError("bad logit value", r + 3);
    }
  }
  try {
    return {BigramPolicy(std::move(logits)), EmaNormState::restore(mean, sd, decay, eps, step, init == 1)};
  } catch (const InputDomainError& e) {
    throw ParseError(e.what(), 2);
  }
}

inline void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path));
}

}  // namespace prefopt
