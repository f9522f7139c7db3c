#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "prefopt/error.hpp"

namespace prefopt {

enum class MarginVariant { power5, log, cube, sigmoid };

inline constexpr std::array<MarginVariant, 4> kAllMarginVariants = {
    MarginVariant::power5, MarginVariant::log, MarginVariant::cube, MarginVariant::sigmoid};

inline std::string_view to_string(MarginVariant v) {
  switch (v) {
    case MarginVariant::power5: return "power5";
    case MarginVariant::log: return "log";
    case MarginVariant::cube: return "cube";
    case MarginVariant::sigmoid: return "sigmoid";
  }
  return "?";
}

inline MarginVariant parse_margin_variant(std::string_view s) {
  for (auto v : kAllMarginVariants)
    if (to_string(v) == s) return v;
  throw InputDomainError("unknown margin variant '" + std::string(s) + "'");
}

struct LmpoConfig {
  double beta = 2.0;
  double log_h = 1.6;  // h = exp(log_h)
  double lambda = 1.0;
  MarginVariant margin_variant = MarginVariant::power5;
  double log_alpha = 2.0;     // alpha of the log margin variant
  double sigmoid_temp = 1.0;  // temperature of the sigmoid margin variant
  bool use_avg_len_norm = true;
  bool use_zscore = true;

  void validate() const {
    if (!(beta > 0)) throw InputDomainError("lmpo beta must be > 0");
    if (!(lambda >= 0)) throw InputDomainError("lmpo lambda must be >= 0");
    if (!(log_alpha > 0)) throw InputDomainError("log_alpha must be > 0");
    if (!(sigmoid_temp > 0)) throw InputDomainError("sigmoid_temp must be > 0");
    if (!std::isfinite(log_h)) throw InputDomainError("log_h must be finite");
  }
};

struct SimpoConfig {
  double beta = 2.0;
  double gamma_target = 0.0;

  void validate() const {
    if (!(beta > 0)) throw InputDomainError("simpo beta must be > 0");
    if (!(gamma_target >= 0)) throw InputDomainError("simpo gamma must be >= 0");
  }
};

struct DpoConfig {
  double beta = 0.1;

  void validate() const {
    if (!(beta > 0)) throw InputDomainError("dpo beta must be > 0");
  }
};

/// Named hyperparameter rows for LMPO (beta, h = e^log_h, lambda).
struct LmpoPreset {
  std::string_view name;
  double beta;
  double log_h;
  double lambda;
};

inline constexpr std::array<LmpoPreset, 4> kLmpoPresets = {{
    {"mistral-base", 2.0, 1.6, 1.0},
    {"mistral-instruct", 2.5, 0.25, 0.2},
    {"llama3-base", 2.0, 1.0, 0.2},
    {"llama3-instruct", 2.5, 1.4, 0.2},
}};

inline const LmpoPreset& find_preset(std::string_view name) {
  for (const auto& p : kLmpoPresets)
    if (p.name == name) return p;
  throw InputDomainError("unknown preset '" + std::string(name) + "'");
}

inline void apply_preset(LmpoConfig& cfg, const LmpoPreset& p) {
  cfg.beta = p.beta;
  cfg.log_h = p.log_h;
  cfg.lambda = p.lambda;
}

/// Per-pair log-probability summary under the trained policy, plus reference
/// totals when a reference policy is in play (DPO).
struct ScoredPair {
  double avg_lp_w = 0.0;
  double avg_lp_l = 0.0;
  double sum_lp_w = 0.0;
  double sum_lp_l = 0.0;
  std::optional<double> ref_sum_lp_w;
  std::optional<double> ref_sum_lp_l;
  std::size_t len_w = 1;
  std::size_t len_l = 1;
};

// log(1 + exp(z)) without overflow.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

inline double length_scale(std::size_t len_w, std::size_t len_l, std::size_t len_y) {
  if (len_w == 0 || len_l == 0 || len_y == 0) throw InputDomainError("lengths must be >= 1");
  return static_cast<double>(len_w + len_l) / (2.0 * static_cast<double>(len_y));
}

inline double scaled_prob(double avg_lp, double scale) { return std::exp(avg_lp * scale); }

inline double margin_power5(double p_w, double p_l) {
  double delta = p_w - p_l;
  double d2 = delta * delta;
  return (1.0 - p_w) * (1.0 - d2 * d2 * delta);
}

inline double margin_cube(double p_w, double p_l) {
  double delta = p_w - p_l;
  return (1.0 - p_w) * (1.0 - delta * delta * delta);
}

inline constexpr double kLogMarginClamp = 1e-6;

inline double clamp_log_delta(double delta) {
  return std::clamp(delta, -1.0 + kLogMarginClamp, 1.0 - kLogMarginClamp);
}

inline double margin_log(double p_w, double p_l, double log_alpha) {
  double delta = clamp_log_delta(p_w - p_l);
  return (1.0 - p_w) * (std::log((1.0 - delta) / (1.0 + delta)) / log_alpha + 0.5);
}

// Positive exponent: the factor shrinks as the chosen/rejected gap grows.
inline double margin_sigmoid(double p_w, double p_l, double sigmoid_temp) {
  return (1.0 - p_w) / (1.0 + std::exp((p_w - p_l) / sigmoid_temp));
}

inline double margin_value(const LmpoConfig& cfg, double p_w, double p_l) {
  switch (cfg.margin_variant) {
    case MarginVariant::power5: return margin_power5(p_w, p_l);
    case MarginVariant::log: return margin_log(p_w, p_l, cfg.log_alpha);
    case MarginVariant::cube: return margin_cube(p_w, p_l);
    case MarginVariant::sigmoid: return margin_sigmoid(p_w, p_l, cfg.sigmoid_temp);
  }
  throw InputDomainError("bad margin variant");
}

/// Probabilities fed to the margin: exp(avg_lp * scale), with the
/// (|y_w| + |y_l|) / (2|y|) scale when length normalization is on.
struct MarginProbs {
  double p_w;
  double p_l;
  double scale_w;
  double scale_l;
};

inline MarginProbs margin_probs(const ScoredPair& pair, const LmpoConfig& cfg) {
  double sw = 1.0, sl = 1.0;
  if (cfg.use_avg_len_norm) {
    sw = length_scale(pair.len_w, pair.len_l, pair.len_w);
    sl = length_scale(pair.len_w, pair.len_l, pair.len_l);
  }
  return {scaled_prob(pair.avg_lp_w, sw), scaled_prob(pair.avg_lp_l, sl), sw, sl};
}

inline double pair_margin(const ScoredPair& pair, const LmpoConfig& cfg) {
  auto p = margin_probs(pair, cfg);
  return margin_value(cfg, p.p_w, p.p_l);
}

inline double lmpo_d(const ScoredPair& pair, double m_bar, const LmpoConfig& cfg) {
  return cfg.beta * pair.avg_lp_w - cfg.beta * pair.avg_lp_l - cfg.lambda * m_bar;
}

// -log(1 / (1 + h exp(-d)))
inline double lmpo_loss(double d, double log_h) { return softplus(log_h - d); }

inline double simpo_inner(const ScoredPair& pair, const SimpoConfig& cfg) {
  return cfg.beta * pair.avg_lp_w - cfg.beta * pair.avg_lp_l - cfg.gamma_target;
}

inline double simpo_loss(const ScoredPair& pair, const SimpoConfig& cfg) {
  return softplus(0.0 - simpo_inner(pair, cfg));
}

inline double dpo_inner(const ScoredPair& pair, const DpoConfig& cfg) {
  if (!pair.ref_sum_lp_w || !pair.ref_sum_lp_l)
    throw InputDomainError("dpo requires reference log-probabilities");
  return cfg.beta *
         ((pair.sum_lp_w - *pair.ref_sum_lp_w) - (pair.sum_lp_l - *pair.ref_sum_lp_l));
}

inline double dpo_loss(const ScoredPair& pair, const DpoConfig& cfg) {
  return softplus(0.0 - dpo_inner(pair, cfg));
}

}  // namespace prefopt
