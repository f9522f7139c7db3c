#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prefopt/data.hpp"
#include "prefopt/error.hpp"
#include "prefopt/io.hpp"
#include "prefopt/losses.hpp"
#include "prefopt/normstate.hpp"
#include "prefopt/policy.hpp"

namespace prefopt {

enum class LossKind { lmpo, simpo, dpo };

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::lmpo: return "lmpo";
    case LossKind::simpo: return "simpo";
    case LossKind::dpo: return "dpo";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
  for (auto k : {LossKind::lmpo, LossKind::simpo, LossKind::dpo})
    if (to_string(k) == s) return k;
  throw InputDomainError("unknown loss '" + std::string(s) + "'");
}

struct LossConfig {
  LossKind kind = LossKind::lmpo;
  LmpoConfig lmpo;
  SimpoConfig simpo;
  DpoConfig dpo;

  void validate() const {
    switch (kind) {
      case LossKind::lmpo: lmpo.validate(); break;
      case LossKind::simpo: simpo.validate(); break;
      case LossKind::dpo: dpo.validate(); break;
    }
  }
};

// d/dd softplus(log_h - d)
inline double dloss_dd(double d, double log_h) { return sigmoid(d - log_h) - 1.0; }

/// Partial derivatives of the configured margin with respect to p_w and p_l.
struct MarginPartials {
  double d_pw;
  double d_pl;
};

inline MarginPartials margin_partials(const LmpoConfig& cfg, double p_w, double p_l) {
  // m = (1 - p_w) * f(delta); f_prime = df/d(delta)
  const double delta = p_w - p_l;
  double f = 0.0, f_prime = 0.0;
  switch (cfg.margin_variant) {
    case MarginVariant::power5: {
      double d4 = delta * delta * delta * delta;
      f = 1.0 - d4 * delta;
      f_prime = -5.0 * d4;
      break;
    }
    case MarginVariant::cube:
      f = 1.0 - delta * delta * delta;
      f_prime = -3.0 * delta * delta;
      break;
    case MarginVariant::log: {
      double c = clamp_log_delta(delta);
      f = std::log((1.0 - c) / (1.0 + c)) / cfg.log_alpha + 0.5;
      // Flat outside the clamp window.
      f_prime = (c == delta) ? -2.0 / (cfg.log_alpha * (1.0 - c * c)) : 0.0;
      break;
    }
    case MarginVariant::sigmoid:
      f = 1.0 / (1.0 + std::exp(delta / cfg.sigmoid_temp));
      f_prime = -f * (1.0 - f) / cfg.sigmoid_temp;
      break;
  }
  const double constraint = 1.0 - p_w;
  return {-f + constraint * f_prime, -constraint * f_prime};
}

/// Product rule for the power-of-5 margin, term by term:
/// -grad_p_w (1 - delta^5) - 5 (1 - p_w) delta^4 (grad_p_w - grad_p_l)
inline GradTable grad_margin_power5(double p_w, double p_l, const GradTable& grad_p_w,
                                    const GradTable& grad_p_l) {
  const double delta = p_w - p_l;
  const double d4 = delta * delta * delta * delta;
  GradTable out(grad_p_w.side());
  out.add_scaled(grad_p_w, -(1.0 - d4 * delta));
  const double k = -5.0 * (1.0 - p_w) * d4;
  out.add_scaled(grad_p_w, k);
  out.add_scaled(grad_p_l, -k);
  return out;
}

inline GradTable grad_margin(const LmpoConfig& cfg, double p_w, double p_l,
                             const GradTable& grad_p_w, const GradTable& grad_p_l) {
  if (cfg.margin_variant == MarginVariant::power5)
    return grad_margin_power5(p_w, p_l, grad_p_w, grad_p_l);
  auto partials = margin_partials(cfg, p_w, p_l);
  GradTable out(grad_p_w.side());
  out.add_scaled(grad_p_w, partials.d_pw);
  out.add_scaled(grad_p_l, partials.d_pl);
  return out;
}

// grad of exp(avg_lp * scale) = p * scale * grad avg_lp
inline GradTable grad_scaled_prob(double p, double scale, const GradTable& grad_avg_lp) {
  GradTable out(grad_avg_lp.side());
  out.add_scaled(grad_avg_lp, p * scale);
  return out;
}

inline GradTable grad_avg_logprob(const BigramPolicy& policy, std::span<const Token> prompt,
                                  std::span<const Token> response) {
  GradTable g(policy.vocab_size());
  accumulate_grad_seq_logprob(policy, prompt, response, 1.0 / static_cast<double>(response.size()), g);
  return g;
}

/// Intermediate quantities of the LMPO loss for one pair.
struct LmpoTerms {
  ScoredPair scored;
  MarginProbs probs;
  double margin;       // m
  double margin_norm;  // m-bar
  double d;
  double loss;
};

inline LmpoTerms lmpo_terms(const BigramPolicy& policy, const PreferenceRecord& rec,
                            const LmpoConfig& cfg, const EmaNormState& state) {
  LmpoTerms t;
  t.scored = score_pair(policy, rec);
  t.probs = margin_probs(t.scored, cfg);
  t.margin = margin_value(cfg, t.probs.p_w, t.probs.p_l);
  t.margin_norm = cfg.use_zscore ? state.normalize(t.margin) : t.margin;
  t.d = lmpo_d(t.scored, t.margin_norm, cfg);
  t.loss = lmpo_loss(t.d, cfg.log_h);
  return t;
}

/// Analytic gradient of the single-pair LMPO loss. EMA statistics are
/// constants; without Z-scoring the margin divisor is 1.
inline GradTable assemble_lmpo_grad(const BigramPolicy& policy, const PreferenceRecord& rec,
                                    const LmpoConfig& cfg, const EmaNormState& state) {
  auto t = lmpo_terms(policy, rec, cfg, state);
  auto g_w = grad_avg_logprob(policy, rec.prompt, rec.chosen);
  auto g_l = grad_avg_logprob(policy, rec.prompt, rec.rejected);

  GradTable grad_d(policy.vocab_size());
  grad_d.add_scaled(g_w, cfg.beta);
  grad_d.add_scaled(g_l, -cfg.beta);

  auto gp_w = grad_scaled_prob(t.probs.p_w, t.probs.scale_w, g_w);
  auto gp_l = grad_scaled_prob(t.probs.p_l, t.probs.scale_l, g_l);
  auto g_m = grad_margin(cfg, t.probs.p_w, t.probs.p_l, gp_w, gp_l);
  const double divisor = cfg.use_zscore ? state.std() : 1.0;
  grad_d.add_scaled(g_m, -cfg.lambda / divisor);

  grad_d *= dloss_dd(t.d, cfg.log_h);
  return grad_d;
}

/// Analytic gradient of the SimPO (ref == nullptr allowed) or DPO loss.
/// The reference policy contributes no gradient.
inline GradTable assemble_baseline_grad(const BigramPolicy& policy, const BigramPolicy* ref,
                                        const PreferenceRecord& rec, const LossConfig& cfg) {
  GradTable g(policy.vocab_size());
  if (cfg.kind == LossKind::simpo) {
    auto s = score_pair(policy, rec);
    auto g_w = grad_avg_logprob(policy, rec.prompt, rec.chosen);
    auto g_l = grad_avg_logprob(policy, rec.prompt, rec.rejected);
    g.add_scaled(g_w, cfg.simpo.beta);
    g.add_scaled(g_l, -cfg.simpo.beta);
    g *= sigmoid(simpo_inner(s, cfg.simpo)) - 1.0;
  } else if (cfg.kind == LossKind::dpo) {
    if (!ref) throw InputDomainError("dpo gradient requires a reference policy");
    auto s = score_pair(policy, rec, ref);
    accumulate_grad_seq_logprob(policy, rec.prompt, rec.chosen, cfg.dpo.beta, g);
    accumulate_grad_seq_logprob(policy, rec.prompt, rec.rejected, -cfg.dpo.beta, g);
    g *= sigmoid(dpo_inner(s, cfg.dpo)) - 1.0;
  } else {
    throw InputDomainError("assemble_baseline_grad: loss must be simpo or dpo");
  }
  return g;
}

inline double pair_loss(const BigramPolicy& policy, const BigramPolicy* ref,
                        const PreferenceRecord& rec, const LossConfig& cfg,
                        const EmaNormState& state) {
  switch (cfg.kind) {
    case LossKind::lmpo: return lmpo_terms(policy, rec, cfg.lmpo, state).loss;
    case LossKind::simpo: return simpo_loss(score_pair(policy, rec), cfg.simpo);
    case LossKind::dpo:
      if (!ref) throw InputDomainError("dpo loss requires a reference policy");
      return dpo_loss(score_pair(policy, rec, ref), cfg.dpo);
  }
  throw InputDomainError("bad loss kind");
}

inline GradTable pair_grad(const BigramPolicy& policy, const BigramPolicy* ref,
                           const PreferenceRecord& rec, const LossConfig& cfg,
                           const EmaNormState& state) {
  if (cfg.kind == LossKind::lmpo) return assemble_lmpo_grad(policy, rec, cfg.lmpo, state);
  return assemble_baseline_grad(policy, ref, rec, cfg);
}

// Mean loss over a batch, summed in index order.
inline double batch_loss(const BigramPolicy& policy, const BigramPolicy* ref,
                         std::span<const PreferenceRecord> batch, const LossConfig& cfg,
                         const EmaNormState& state) {
  if (batch.empty()) throw InputDomainError("empty batch");
  double total = 0.0;
  for (const auto& rec : batch) total += pair_loss(policy, ref, rec, cfg, state);
  return total / static_cast<double>(batch.size());
}

inline GradTable batch_grad(const BigramPolicy& policy, const BigramPolicy* ref,
                            std::span<const PreferenceRecord> batch, const LossConfig& cfg,
                            const EmaNormState& state) {
  if (batch.empty()) throw InputDomainError("empty batch");
  GradTable g(policy.vocab_size());
  for (const auto& rec : batch) g += pair_grad(policy, ref, rec, cfg, state);
  g *= 1.0 / static_cast<double>(batch.size());
  return g;
}

using PolicyLoss = std::function<double(const BigramPolicy&)>;

/// Central differences over every logit. The caller's closure owns any
/// state it needs, so probes all see the same frozen statistics.
inline GradTable finite_diff_grad(const PolicyLoss& loss_eval, const BigramPolicy& policy,
                                  double step) {
  if (!(step > 0)) throw InputDomainError("finite difference step must be > 0");
  BigramPolicy probe = policy;
  GradTable out(policy.vocab_size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double orig = probe.logits()[i];
    probe.logits()[i] = orig + step;
    const double plus = loss_eval(probe);
    probe.logits()[i] = orig - step;
    const double minus = loss_eval(probe);
    probe.logits()[i] = orig;
    if (!std::isfinite(plus) || !std::isfinite(minus))
      throw NumericError("non-finite loss during finite differencing");
    out[i] = (plus - minus) / (2.0 * step);
  }
  return out;
}

struct GradReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t n_params_checked = 0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;

  // Folds another report in (max errors, summed counts, max norms).
  void merge(const GradReport& o) {
    max_abs_err = std::max(max_abs_err, o.max_abs_err);
    max_rel_err = std::max(max_rel_err, o.max_rel_err);
    n_params_checked += o.n_params_checked;
    analytic_norm = std::max(analytic_norm, o.analytic_norm);
    numeric_norm = std::max(numeric_norm, o.numeric_norm);
  }
};

// Central differences in double carry ~1e-10 of rounding noise, which makes
// near-zero entries look wrong in relative terms. The denominator is floored
// at this fraction of the largest numeric entry of the same table.
inline constexpr double kRelErrScaleFloor = 1e-3;

// rel error per entry: |a - n| / max(|a|, |n|, 1e-12, scale_floor * max_j |n_j|)
inline GradReport compare_gradients(const GradTable& analytic, const GradTable& numeric,
                                    double scale_floor = kRelErrScaleFloor) {
  if (analytic.size() != numeric.size()) throw InputDomainError("gradient shape mismatch");
  double scale = 0.0;
  for (double n : numeric.values()) scale = std::max(scale, std::abs(n));
  const double floor = std::max(1e-12, scale_floor * scale);
  GradReport r;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    double a = analytic[i], n = numeric[i];
    double abs_err = std::abs(a - n);
    double rel_err = abs_err / std::max({std::abs(a), std::abs(n), floor});
    r.max_abs_err = std::max(r.max_abs_err, abs_err);
    r.max_rel_err = std::max(r.max_rel_err, rel_err);
  }
  r.n_params_checked = analytic.size();
  r.analytic_norm = analytic.norm();
  r.numeric_norm = numeric.norm();
  return r;
}

inline GradReport grad_check(const BigramPolicy& policy, const BigramPolicy* ref,
                             std::span<const PreferenceRecord> sample, const LossConfig& cfg,
                             const EmaNormState& state, double step = 1e-5) {
  if (sample.empty()) throw InputDomainError("grad_check needs a non-empty sample");
  auto analytic = batch_grad(policy, ref, sample, cfg, state);
  const EmaNormState frozen = state;
  auto numeric = finite_diff_grad(
      [&](const BigramPolicy& p) { return batch_loss(p, ref, sample, cfg, frozen); }, policy, step);
  return compare_gradients(analytic, numeric);
}

// Single-line report: max_abs_err=<v> max_rel_err=<v> n=<v>
inline std::string format_report(const GradReport& r) {
  return "max_abs_err=" + format_double(r.max_abs_err) + " max_rel_err=" +
         format_double(r.max_rel_err) + " n=" + std::to_string(r.n_params_checked);
}

// Every configuration a randomized check cycles through: all LMPO
// variant x length-norm x z-score combinations, then SimPO and DPO. A
// variant filter keeps only the LMPO combinations of that variant.
inline std::vector<LossConfig> grad_check_configs(std::optional<MarginVariant> only = std::nullopt) {
  std::vector<LossConfig> out;
  for (auto v : kAllMarginVariants) {
    if (only && *only != v) continue;
    for (bool len_norm : {false, true})
      for (bool zscore : {false, true}) {
        LossConfig c;
        c.lmpo.margin_variant = v;
        c.lmpo.use_avg_len_norm = len_norm;
        c.lmpo.use_zscore = zscore;
        out.push_back(c);
      }
  }
  if (!only) {
    LossConfig simpo;
    simpo.kind = LossKind::simpo;
    simpo.simpo.gamma_target = 0.5;
    LossConfig dpo;
    dpo.kind = LossKind::dpo;
    out.push_back(simpo);
    out.push_back(dpo);
  }
  return out;
}

struct GradCheckSpec {
  std::size_t trials = 100;
  std::uint64_t seed = 0;
  std::optional<MarginVariant> variant;
  std::size_t max_vocab = 8;
  std::size_t max_len = 12;
  std::size_t records = 4;
  double step = 1e-5;

  void validate() const {
    if (trials < 1) throw InputDomainError("trials must be >= 1");
    if (max_vocab < 2) throw InputDomainError("max vocab must be >= 2");
    if (max_len < 1) throw InputDomainError("max length must be >= 1");
    if (records < 1) throw InputDomainError("records must be >= 1");
    if (!(step > 0) || !std::isfinite(step)) throw InputDomainError("step must be > 0");
  }
};

/// Trial t uses configuration t mod |configs| on a fresh instance: vocab
/// uniform in [2, max_vocab], N(0,1) logits for policy and reference,
/// random token sequences of length 1..max_len, and an initialized EMA state
/// with mean U(0,1) and std U(0.05,1).
inline GradReport randomized_grad_check(const GradCheckSpec& spec) {
  spec.validate();
  const auto configs = grad_check_configs(spec.variant);
  Rng rng(spec.seed);
  std::uniform_int_distribution<std::size_t> vocab_dist(2, spec.max_vocab);
  std::uniform_int_distribution<std::size_t> len_dist(1, spec.max_len);
  std::uniform_real_distribution<double> mean_dist(0.0, 1.0), std_dist(0.05, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  GradReport total;
  for (std::size_t t = 0; t < spec.trials; ++t) {
    const auto& cfg = configs[t % configs.size()];
    const std::size_t V = vocab_dist(rng);
    std::uniform_int_distribution<Token> tok(0, static_cast<Token>(V - 1));
    auto random_table = [&] {
      Table tab(V);
      for (std::size_t i = 0; i < tab.size(); ++i) tab[i] = normal(rng);
      return BigramPolicy(std::move(tab));
    };
    auto random_seq = [&] {
      TokenSeq s(len_dist(rng));
      for (auto& x : s) x = tok(rng);
      return s;
    };
    BigramPolicy policy = random_table();
    BigramPolicy ref = random_table();
    std::vector<PreferenceRecord> sample;
    for (std::size_t i = 0; i < spec.records; ++i) {
      PreferenceRecord r;
      r.prompt = random_seq();
      r.chosen = random_seq();
      r.rejected = random_seq();
      sample.push_back(std::move(r));
    }
    double mean = mean_dist(rng);
    double sd = std_dist(rng);
    auto state = EmaNormState::restore(mean, sd, EmaNormState::kDefaultDecay, EmaNormState::kDefaultEpsilon, 1, true);
    total.merge(grad_check(policy, &ref, sample, cfg, state, spec.step));
  }
  return total;
}

}  // namespace prefopt
