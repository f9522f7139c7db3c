#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "prefopt/error.hpp"

namespace prefopt {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;
using Rng = std::mt19937_64;

// Reserved end-of-sequence id used by sampling.
inline constexpr Token kEndToken = 0;

/// Dense V x V table of doubles, row-major. Used both for policy logits and
/// for gradients with respect to them.
class Table {
 public:
  Table() = default;
  explicit Table(std::size_t side) : side_(side), data_(side * side, 0.0) {}

  std::size_t side() const noexcept { return side_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * side_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * side_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * side_, side_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * side_, side_}; }
  std::span<const double> values() const noexcept { return data_; }

  // this += scale * other
  void add_scaled(const Table& other, double scale) {
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
  }

  Table& operator+=(const Table& other) {
    add_scaled(other, 1.0);
    return *this;
  }

  Table& operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
  }

  friend Table operator*(double s, Table t) { return t *= s; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  double norm() const {
    double s = 0.0;
    for (double x : data_) s += x * x;
    return std::sqrt(s);
  }

  friend bool operator==(const Table&, const Table&) = default;

 private:
  std::size_t side_ = 0;
  std::vector<double> data_;
};

using GradTable = Table;

/// Tabular bigram softmax language model. Row c of the logit table scores
/// the next token given previous token c; a prompt enters only through its
/// last token.
class BigramPolicy {
 public:
  explicit BigramPolicy(std::size_t vocab_size) : logits_(check_vocab(vocab_size)) {}

  explicit BigramPolicy(Table logits) : logits_(std::move(logits)) {
    check_vocab(logits_.side());
    if (!logits_.all_finite()) throw InputDomainError("policy logits must be finite");
  }

  std::size_t vocab_size() const noexcept { return logits_.side(); }
  const Table& logits() const noexcept { return logits_; }
  Table& logits() noexcept { return logits_; }

  std::vector<double> log_softmax(Token context) const {
    auto row = logits_.row(static_cast<std::size_t>(context));
    double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double x : row) sum += std::exp(x - mx);
    double lse = mx + std::log(sum);
    std::vector<double> out(row.size());
    for (std::size_t v = 0; v < row.size(); ++v) out[v] = row[v] - lse;
    return out;
  }

  std::vector<double> softmax(Token context) const {
    auto out = log_softmax(context);
    for (double& x : out) x = std::exp(x);
    return out;
  }

  friend bool operator==(const BigramPolicy&, const BigramPolicy&) = default;

 private:
  static std::size_t check_vocab(std::size_t v) {
    if (v < 2) throw InputDomainError("vocab size must be >= 2");
    return v;
  }

  Table logits_;
};

inline void check_tokens(std::span<const Token> seq, std::size_t vocab, const char* what) {
  if (seq.empty()) throw InputDomainError(std::string(what) + " must be non-empty");
  for (Token t : seq) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw InputDomainError(std::string(what) + " token id " + std::to_string(t) +
                             " out of range [0, " + std::to_string(vocab) + ")");
    }
  }
}

/// Total log-probability of response given prompt:
/// sum_t log softmax(logits[c_{t-1}])[y_t] with c_0 the last prompt token.
inline double seq_logprob(const BigramPolicy& policy, std::span<const Token> prompt,
                          std::span<const Token> response) {
  check_tokens(prompt, policy.vocab_size(), "prompt");
  check_tokens(response, policy.vocab_size(), "response");
  double total = 0.0;
  Token ctx = prompt.back();
  for (Token y : response) {
    total += policy.log_softmax(ctx)[static_cast<std::size_t>(y)];
    ctx = y;
  }
  return total;
}

inline double avg_logprob(const BigramPolicy& policy, std::span<const Token> prompt,
                          std::span<const Token> response) {
  return seq_logprob(policy, prompt, response) / static_cast<double>(response.size());
}

/// out += weight * grad_theta seq_logprob. Each step with context c and
/// observed token v adds weight * (onehot(v) - softmax(logits[c])) to row c.
inline void accumulate_grad_seq_logprob(const BigramPolicy& policy, std::span<const Token> prompt,
                                        std::span<const Token> response, double weight,
                                        GradTable& out) {
  check_tokens(prompt, policy.vocab_size(), "prompt");
  check_tokens(response, policy.vocab_size(), "response");
  if (out.side() != policy.vocab_size()) throw InputDomainError("gradient table shape mismatch");
  Token ctx = prompt.back();
  for (Token y : response) {
    auto probs = policy.softmax(ctx);
    auto row = out.row(static_cast<std::size_t>(ctx));
    for (std::size_t v = 0; v < probs.size(); ++v) row[v] -= weight * probs[v];
    row[static_cast<std::size_t>(y)] += weight;
    ctx = y;
  }
}

inline GradTable grad_seq_logprob(const BigramPolicy& policy, std::span<const Token> prompt,
                                  std::span<const Token> response) {
  GradTable g(policy.vocab_size());
  accumulate_grad_seq_logprob(policy, prompt, response, 1.0, g);
  return g;
}

/// Ancestral sampling from the last prompt token. Stops after emitting
/// kEndToken (which is included) or at max_len tokens.
inline TokenSeq sample(const BigramPolicy& policy, std::span<const Token> prompt,
                       std::size_t max_len, Rng& rng) {
  if (max_len < 1) throw InputDomainError("max_len must be >= 1");
  check_tokens(prompt, policy.vocab_size(), "prompt");
  TokenSeq out;
  Token ctx = prompt.back();
  while (out.size() < max_len) {
    auto probs = policy.softmax(ctx);
    std::discrete_distribution<Token> pick(probs.begin(), probs.end());
    ctx = pick(rng);
    out.push_back(ctx);
    if (ctx == kEndToken) break;
  }
  return out;
}

}  // namespace prefopt
