#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "prefopt/error.hpp"
#include "prefopt/io.hpp"
#include "prefopt/losses.hpp"
#include "prefopt/policy.hpp"

namespace prefopt {

struct PreferenceRecord {
  TokenSeq prompt;
  TokenSeq chosen;
  TokenSeq rejected;

  friend bool operator==(const PreferenceRecord&, const PreferenceRecord&) = default;
};

struct Dataset {
  std::size_t vocab_size = 2;
  std::vector<PreferenceRecord> records;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline void validate_record(const PreferenceRecord& r, std::size_t vocab) {
  check_tokens(r.prompt, vocab, "prompt");
  check_tokens(r.chosen, vocab, "chosen");
  check_tokens(r.rejected, vocab, "rejected");
}

/// Scores both responses of a record. Reference totals are filled in only
/// when ref is non-null.
inline ScoredPair score_pair(const BigramPolicy& policy, const PreferenceRecord& r,
                             const BigramPolicy* ref = nullptr) {
  ScoredPair s;
  s.len_w = r.chosen.size();
  s.len_l = r.rejected.size();
  s.sum_lp_w = seq_logprob(policy, r.prompt, r.chosen);
  s.sum_lp_l = seq_logprob(policy, r.prompt, r.rejected);
  s.avg_lp_w = s.sum_lp_w / static_cast<double>(s.len_w);
  s.avg_lp_l = s.sum_lp_l / static_cast<double>(s.len_l);
  if (ref) {
    s.ref_sum_lp_w = seq_logprob(*ref, r.prompt, r.chosen);
    s.ref_sum_lp_l = seq_logprob(*ref, r.prompt, r.rejected);
  }
  return s;
}

struct LengthRange {
  std::size_t lo = 1;
  std::size_t hi = 1;
};

/// Synthetic preference generator settings. Responses are drawn from a
/// shared random teacher: chosen at temperature 1/teacher_sharpness,
/// rejected at temperature noise_temp. Every response ends with kEndToken.
struct GenSpec {
  std::size_t vocab_size = 8;
  std::size_t n_pairs = 2000;
  std::size_t prompt_len = 2;
  LengthRange chosen_len{3, 10};
  LengthRange rejected_len{3, 10};
  double teacher_sharpness = 2.0;
  double noise_temp = 2.0;
  // Rejected lengths drawn from [2 * chosen.lo, 2 * chosen.hi] instead.
  bool length_bias = false;
  std::uint64_t seed = 0;

  LengthRange effective_rejected_len() const {
    return length_bias ? LengthRange{2 * chosen_len.lo, 2 * chosen_len.hi} : rejected_len;
  }

  void validate() const {
    if (vocab_size < 2) throw InputDomainError("vocab must be >= 2");
    if (n_pairs < 1) throw InputDomainError("pairs must be >= 1");
    if (prompt_len < 1) throw InputDomainError("prompt length must be >= 1");
    for (auto r : {chosen_len, rejected_len})
      if (r.lo < 1 || r.hi < r.lo) throw InputDomainError("length range must satisfy 1 <= lo <= hi");
    if (!(teacher_sharpness > 0)) throw InputDomainError("teacher sharpness must be > 0");
    if (!(noise_temp >= 1)) throw InputDomainError("noise temperature must be >= 1");
  }
};

namespace detail {

// len - 1 non-end tokens from the tempered teacher, then kEndToken.
inline TokenSeq sample_response(const Table& teacher, Token start, std::size_t len,
                                double temperature, Rng& rng) {
  const std::size_t V = teacher.side();
  TokenSeq out;
  out.reserve(len);
  Token ctx = start;
  std::vector<double> w(V);
  for (std::size_t t = 0; t + 1 < len; ++t) {
    auto row = teacher.row(static_cast<std::size_t>(ctx));
    double mx = row[1];
    for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
    w[0] = 0.0;
    for (std::size_t v = 1; v < V; ++v) w[v] = std::exp((row[v] - mx) / temperature);
    std::discrete_distribution<Token> pick(w.begin(), w.end());
    ctx = pick(rng);
    out.push_back(ctx);
  }
  out.push_back(kEndToken);
  return out;
}

}  // namespace detail

inline Dataset generate(const GenSpec& spec) {
  spec.validate();
  const std::size_t V = spec.vocab_size;
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Table teacher(V);
  for (std::size_t i = 0; i < teacher.size(); ++i) teacher[i] = normal(rng);

  std::uniform_int_distribution<Token> prompt_tok(1, static_cast<Token>(V - 1));
  std::uniform_int_distribution<std::size_t> chosen_len(spec.chosen_len.lo, spec.chosen_len.hi);
  auto rr = spec.effective_rejected_len();
  std::uniform_int_distribution<std::size_t> rejected_len(rr.lo, rr.hi);

  Dataset ds;
  ds.vocab_size = V;
  ds.records.reserve(spec.n_pairs);
  for (std::size_t i = 0; i < spec.n_pairs; ++i) {
    PreferenceRecord r;
    for (std::size_t t = 0; t < spec.prompt_len; ++t) r.prompt.push_back(prompt_tok(rng));
    std::size_t lw = chosen_len(rng);
    std::size_t ll = rejected_len(rng);
    r.chosen = detail::sample_response(teacher, r.prompt.back(), lw, 1.0 / spec.teacher_sharpness, rng);
    r.rejected = detail::sample_response(teacher, r.prompt.back(), ll, spec.noise_temp, rng);
    ds.records.push_back(std::move(r));
  }
  return ds;
}

inline std::string dataset_header(std::size_t vocab) {
  return "# prefopt-v1 vocab=" + std::to_string(vocab);
}

inline std::string serialize_dataset(const Dataset& ds) {
  std::string out = dataset_header(ds.vocab_size) + "\n";
  auto put = [&out](const TokenSeq& seq) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(seq[i]);
    }
  };
  for (const auto& r : ds.records) {
    put(r.prompt);
    out += " | ";
    put(r.chosen);
    out += " | ";
    put(r.rejected);
    out += '\n';
  }
  return out;
}

inline Dataset parse_dataset(std::string_view text) {
  auto lines = split_lines(text);
  if (lines.empty()) throw ParseError("missing header", 1);
  constexpr std::string_view prefix = "# prefopt-v1 vocab=";
  if (!lines[0].starts_with(prefix)) throw ParseError("bad header", 1);
  Dataset ds;
  if (!parse_int(lines[0].substr(prefix.size()), ds.vocab_size) || ds.vocab_size < 2)
    throw ParseError("bad vocab size in header", 1);

  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t lineno = i + 1;
    std::string_view line = lines[i];
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
      auto bar = line.find(" | ", start);
      if (bar == std::string_view::npos) {
        fields.push_back(line.substr(start));
        break;
      }
      fields.push_back(line.substr(start, bar - start));
      start = bar + 3;
    }
    if (fields.size() != 3) throw ParseError("expected 3 fields separated by ' | '", lineno);
    std::array<TokenSeq, 3> seqs;
    for (std::size_t f = 0; f < 3; ++f) {
      for (auto tok : split_ws(fields[f])) {
        Token t = 0;
        if (!parse_int(tok, t)) throw ParseError("bad token '" + std::string(tok) + "'", lineno);
        if (t < 0 || static_cast<std::size_t>(t) >= ds.vocab_size)
          throw ParseError("token id " + std::to_string(t) + " out of range", lineno);
        seqs[f].push_back(t);
      }
      if (seqs[f].empty()) throw ParseError("empty field", lineno);
    }
    ds.records.push_back({std::move(seqs[0]), std::move(seqs[1]), std::move(seqs[2])});
  }
  return ds;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_dataset(ds));
}

inline Dataset read_dataset(const std::filesystem::path& path) { return parse_dataset(read_file(path)); }

}  // namespace prefopt
