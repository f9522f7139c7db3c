#pragma once

#include <cstdint>
#include <random>

#include "prefopt/data.hpp"
#include "prefopt/policy.hpp"

namespace prefopt::test_util {

inline BigramPolicy random_policy(std::size_t vocab, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  BigramPolicy p(vocab);
  for (std::size_t i = 0; i < p.logits().size(); ++i) p.logits()[i] = n(rng);
  return p;
}

inline TokenSeq random_seq(std::size_t vocab, std::size_t len, Rng& rng) {
  std::uniform_int_distribution<Token> tok(0, static_cast<Token>(vocab - 1));
  TokenSeq s(len);
  for (auto& t : s) t = tok(rng);
  return s;
}

inline PreferenceRecord random_record(std::size_t vocab, std::size_t max_len, Rng& rng) {
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  return {random_seq(vocab, len(rng), rng), random_seq(vocab, len(rng), rng),
          random_seq(vocab, len(rng), rng)};
}

}  // namespace prefopt::test_util
