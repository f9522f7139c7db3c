// Acceptance run: one PASS/FAIL line per headline criterion. Exit status is
// the number of failing criteria (0 when all pass).

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "prefopt/data.hpp"
#include "prefopt/gradients.hpp"
#include "prefopt/io.hpp"
#include "prefopt/losses.hpp"
#include "prefopt/normstate.hpp"
#include "prefopt/trainer.hpp"

namespace fs = std::filesystem;
using namespace prefopt;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 6) {
  std::ostringstream ss;
  ss.precision(prec);
  ss << v;
  return ss.str();
}

int run_cli(const fs::path& dir, const std::string& args, std::string* out = nullptr) {
  const auto log = dir / "cli_stdout.txt";
  std::string cmd = "cd '" + dir.string() + "' && '" + PREFOPT_CLI_PATH + "' " + args + " >'" + log.string() +
                    "' 2>&1";
  int status = std::system(cmd.c_str());
  if (out) *out = read_file(log);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Dataset standard_set(std::uint64_t seed) {
  GenSpec g;
  g.seed = seed;
  return generate(g);
}

Outcome gradient_certification(const fs::path& dir) {
  auto t0 = Clock::now();
  std::string out;
  int code = run_cli(dir, "grad-check --trials 100 --tol 1e-5 --max-vocab 8 --max-len 12", &out);
  double secs = seconds_since(t0);
  while (!out.empty() && out.back() == '\n') out.pop_back();
  const std::size_t n_configs = grad_check_configs().size();
  Outcome o;
  o.pass = code == 0 && secs < 30.0 && n_configs == 18;
  o.detail = "exit=" + std::to_string(code) + " configs=" + std::to_string(n_configs) + " time=" + fmt(secs, 3) +
             "s [" + out + "]";
  return o;
}

Outcome scalar_anchors() {
  const double ln2 = std::log(2.0);
  double a = lmpo_loss(0.0, 0.0);
  double b = dloss_dd(0.0, 0.0);
  double c = margin_power5(0.8, 0.3);
  TrainConfig tc;
  tc.loss.kind = LossKind::dpo;
  tc.steps = 1;
  tc.seed = 1;
  double d = train(standard_set(1), tc).metrics.at(0).loss;
  Outcome o;
  o.pass = std::abs(a - ln2) <= 1e-12 && std::abs(b + 0.5) <= 1e-12 && std::abs(c - 0.19375) <= 1e-12 &&
           std::abs(d - ln2) <= 1e-12;
  o.detail = "lmpo_loss(0,0)=" + format_double(a) + " dloss_dd(0,0)=" + format_double(b) +
             " margin_power5(0.8,0.3)=" + format_double(c) + " dpo_first_step=" + format_double(d);
  return o;
}

Outcome reduction_equivalence() {
  auto ds = standard_set(1);
  TrainConfig lm;
  lm.seed = 1;
  lm.loss.lmpo.lambda = 0.0;
  lm.loss.lmpo.log_h = 0.0;
  lm.loss.lmpo.use_zscore = false;
  lm.loss.lmpo.use_avg_len_norm = false;
  TrainConfig si = lm;
  si.loss.kind = LossKind::simpo;
  si.loss.simpo.beta = lm.loss.lmpo.beta;
  si.loss.simpo.gamma_target = 0.0;
  auto a = train(ds, lm);
  auto b = train(ds, si);
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < a.metrics.size(); ++i) mismatches += a.metrics[i].loss != b.metrics[i].loss;
  Outcome o;
  o.pass = a.metrics.size() == 500 && mismatches == 0 && a.policy == b.policy;
  o.detail = "steps=" + std::to_string(a.metrics.size()) + " loss_mismatches=" + std::to_string(mismatches) +
             " final_params_equal=" + (a.policy == b.policy ? "yes" : "no");
  return o;
}

Outcome probability_decrement() {
  auto t0 = Clock::now();
  int wins = 0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto ds = standard_set(seed);
    TrainConfig lm;
    lm.seed = seed;
    TrainConfig si = lm;
    si.loss.kind = LossKind::simpo;
    si.loss.simpo.gamma_target = 0.0;
    const EvalConfig ec{seed, lm.sample_max_len};
    double c_lm = evaluate(train(ds, lm).policy, ds, ec).mean_chosen_avg_lp;
    double c_si = evaluate(train(ds, si).policy, ds, ec).mean_chosen_avg_lp;
    wins += c_lm > c_si;
    per_seed += " s" + std::to_string(seed) + "=" + fmt(c_lm, 4) + "/" + fmt(c_si, 4);
  }
  double secs = seconds_since(t0);
  Outcome o;
  o.pass = wins >= 4 && secs < 300.0;
  o.detail = "lmpo>simpo in " + std::to_string(wins) + "/5 seeds (chosen lmpo/simpo:" + per_seed +
             ") time=" + fmt(secs, 3) + "s";
  return o;
}

// Length-biased set: rejected responses twice as long and noisier than chosen.
GenSpec length_biased_spec(std::uint64_t seed) {
  GenSpec g;
  g.length_bias = true;
  g.chosen_len = {6, 16};
  g.teacher_sharpness = 2.0;
  g.noise_temp = 4.0;
  g.seed = seed;
  return g;
}

Outcome length_trend() {
  int monotone = 0, direction_ok_in_passing = 0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto ds = generate(length_biased_spec(seed));
    TrainConfig tc;
    tc.seed = seed;
    tc.sample_max_len = 128;
    double len[3];
    int i = 0;
    for (double lambda : {0.05, 0.2, 1.0}) {
      tc.loss.lmpo.lambda = lambda;
      len[i++] = evaluate(train(ds, tc).policy, ds, {seed, tc.sample_max_len}).mean_sampled_length;
    }
    bool mono = len[0] >= len[1] && len[1] >= len[2];
    monotone += mono;
    direction_ok_in_passing += mono && len[0] > len[2];
    per_seed += " s" + std::to_string(seed) + "=" + fmt(len[0], 4) + "/" + fmt(len[1], 4) + "/" + fmt(len[2], 4);
  }
  Outcome o;
  o.pass = monotone >= 4 && direction_ok_in_passing == monotone;
  o.detail = "non-increasing in " + std::to_string(monotone) + "/5 seeds, L(0.05)>L(1.0) in " +
             std::to_string(direction_ok_in_passing) + " of those (L at lambda 0.05/0.2/1.0:" + per_seed + ")";
  return o;
}

Outcome separability() {
  GenSpec sym;
  sym.teacher_sharpness = 1.0;
  sym.noise_temp = 1.0;
  sym.seed = 1;
  double untrained = evaluate(BigramPolicy(8), generate(sym), {1, 64}).reward_accuracy;
  int above = 0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto ds = standard_set(seed);
    TrainConfig tc;
    tc.seed = seed;
    double acc = evaluate(train(ds, tc).policy, ds, {seed, 64}).reward_accuracy;
    above += acc > 0.9;
    per_seed += " s" + std::to_string(seed) + "=" + fmt(acc, 4);
  }
  Outcome o;
  o.pass = std::abs(untrained - 0.5) <= 0.05 && above >= 4;
  o.detail = "untrained=" + fmt(untrained, 4) + " trained>0.9 in " + std::to_string(above) + "/5 seeds (" +
             per_seed.substr(1) + ")";
  return o;
}

Outcome ema_invariants() {
  std::vector<double> batch{0.1, 0.5, 0.6, 0.9};
  EmaNormState s;
  for (int i = 0; i < 200; ++i) s.update(batch);
  double norm_mean = 0.0;
  for (double m : batch) norm_mean += s.normalize(m);
  norm_mean /= static_cast<double>(batch.size());

  EmaNormState z;
  std::vector<double> flat(16, 0.37);
  z.update(flat);
  bool floor_ok = z.std() == z.epsilon() && std::isfinite(z.normalize(1.0));
  z.update(flat);
  floor_ok = floor_ok && z.std() >= z.epsilon();

  Rng rng(99);
  std::uniform_real_distribution<double> u(-3.0, 3.0), us(0.01, 2.0);
  double worst_shift = 0.0;
  for (int i = 0; i < 10000; ++i) {
    double mean = u(rng), sd = us(rng), m = u(rng), c = u(rng);
    auto a = EmaNormState::restore(mean, sd, 0.9, 1e-8, 1, true);
    auto b = EmaNormState::restore(mean + c, sd, 0.9, 1e-8, 1, true);
    worst_shift = std::max(worst_shift, std::abs(a.normalize(m) - b.normalize(m + c)));
  }
  Outcome o;
  o.pass = std::abs(norm_mean) < 1e-6 && floor_ok && worst_shift < 1e-9;
  o.detail = "fixed_point_batch_mean=" + fmt(norm_mean, 3) + " std_floor=" + (floor_ok ? "ok" : "violated") +
             " translation_max_diff=" + fmt(worst_shift, 3);
  return o;
}

Outcome determinism(const fs::path& dir) {
  int g = run_cli(dir, "gen-data --vocab 8 --pairs 2000 --seed 7 --out d.txt");
  const std::string args = "compare --losses lmpo,simpo,dpo --seeds 1,2 --steps 500 --data d.txt --out ";
  int a = run_cli(dir, args + "run_a.csv");
  int b = run_cli(dir, args + "run_b.csv");
  bool same = false;
  std::size_t bytes = 0;
  if (g == 0 && a == 0 && b == 0) {
    auto x = read_file(dir / "run_a.csv");
    same = x == read_file(dir / "run_b.csv");
    bytes = x.size();
  }
  Outcome o;
  o.pass = same && bytes > 0;
  o.detail = "exit codes " + std::to_string(g) + "/" + std::to_string(a) + "/" + std::to_string(b) +
             ", csv bytes=" + std::to_string(bytes) + (same ? ", byte-identical" : ", DIFFERENT");
  return o;
}

}  // namespace

int main() {
  const fs::path dir = fs::temp_directory_path() / "prefopt_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient-certification", [&] { return gradient_certification(dir); }},
      {"scalar-anchors", scalar_anchors},
      {"reduction-equivalence", reduction_equivalence},
      {"probability-decrement", probability_decrement},
      {"length-control-trend", length_trend},
      {"separability", separability},
      {"ema-invariants", ema_invariants},
      {"determinism", [&] { return determinism(dir); }},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(dir);
  return failures;
}
