// prefopt command-line frontend: gen-data, train, compare, grad-check, eval.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prefopt/data.hpp"
#include "prefopt/gradients.hpp"
#include "prefopt/io.hpp"
#include "prefopt/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace prefopt;

namespace {

enum ExitCode : int { kOk = 0, kUsage = 2, kNumeric = 3, kTolerance = 4, kIo = 5 };

// Thrown for flag combinations CLI11 cannot validate on its own.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t default_seed() {
  const char* env = std::getenv("PREFOPT_SEED");
  if (!env) return 0;
  std::uint64_t v = 0;
  if (!parse_int(std::string_view(env), v)) throw UsageError("PREFOPT_SEED must be a non-negative integer");
  return v;
}

// Effective value of every option on a subcommand, in declaration order.
ordered_json option_values(const CLI::App& sub) {
  ordered_json flags = ordered_json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_lnames().empty() || opt->get_lnames()[0] == "help") continue;
    const std::string& name = opt->get_lnames()[0];
    if (opt->get_expected_min() == 0) {
      flags[name] = opt->count() > 0;
    } else if (opt->count() == 0) {
      const std::string def = opt->get_default_str();
      flags[name] = def.empty() ? ordered_json(nullptr) : ordered_json(def);
    } else {
      std::string joined;
      for (const auto& r : opt->results()) joined += (joined.empty() ? "" : ",") + r;
      flags[name] = joined;
    }
  }
  return flags;
}

void write_manifest(const fs::path& path, const CLI::App& sub, std::uint64_t seed,
                    const std::optional<fs::path>& data, const std::vector<fs::path>& outputs) {
  ordered_json m;
  m["command"] = sub.get_name();
  m["flags"] = option_values(sub);
  m["seed"] = seed;
  m["dataset_hash"] = data ? "fnv1a64:" + hex64(fnv1a64(read_file(*data))) : "";
  ordered_json outs = ordered_json::array();
  for (const auto& o : outputs) outs.push_back(o.generic_string());
  m["outputs"] = outs;
  m["version"] = PREFOPT_VERSION;
  write_file_atomic(path, m.dump(2) + "\n");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto comma = s.find(',', start);
    auto end = comma == std::string::npos ? s.size() : comma;
    if (end > start) out.push_back(s.substr(start, end - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

// ---- shared training flags -------------------------------------------------

struct TrainFlags {
  std::string data;
  std::string loss = "lmpo";
  std::string preset;
  std::optional<double> beta, lambda, log_h, gamma, log_alpha, sigmoid_temp;
  std::string variant = "power5";
  bool no_zscore = false;
  bool no_lennorm = false;
  double lr = 1.0;
  std::size_t steps = 500;
  std::size_t batch = 64;
  std::size_t eval_every = 50;
  std::size_t sample_max_len = 64;
  double ema_decay = EmaNormState::kDefaultDecay;
  std::uint64_t seed = 0;
};

void add_train_flags(CLI::App* sub, TrainFlags& f, bool with_loss) {
  sub->add_option("--data", f.data, "Dataset file")->required();
  if (with_loss) sub->add_option("--loss", f.loss, "lmpo | simpo | dpo");
  sub->add_option("--preset", f.preset, "LMPO preset: mistral-base, mistral-instruct, llama3-base, llama3-instruct");
  sub->add_option("--beta", f.beta, "Reward scale for the selected loss");
  sub->add_option("--lambda", f.lambda, "LMPO margin weight");
  sub->add_option("--log-h", f.log_h, "LMPO log home-field advantage");
  sub->add_option("--gamma", f.gamma, "SimPO target reward margin");
  sub->add_option("--variant", f.variant, "LMPO margin: power5 | log | cube | sigmoid");
  sub->add_option("--log-alpha", f.log_alpha, "Alpha of the log margin");
  sub->add_option("--sigmoid-temp", f.sigmoid_temp, "Temperature of the sigmoid margin");
  sub->add_flag("--no-zscore", f.no_zscore, "Disable EMA z-score normalization of the margin");
  sub->add_flag("--no-lennorm", f.no_lennorm, "Disable average-length normalization in the margin");
  sub->add_option("--lr", f.lr, "Learning rate");
  sub->add_option("--steps", f.steps, "Training steps");
  sub->add_option("--batch", f.batch, "Batch size");
  sub->add_option("--eval-every", f.eval_every, "Sampled-length evaluation interval");
  sub->add_option("--sample-max-len", f.sample_max_len, "Cap on sampled response length");
  sub->add_option("--ema-decay", f.ema_decay, "Decay of the z-score EMA");
  sub->add_option("--seed", f.seed, "Seed (default: $PREFOPT_SEED or 0)");
}

TrainConfig make_train_config(const TrainFlags& f, LossKind kind) {
  TrainConfig tc;
  tc.loss.kind = kind;
  auto& lm = tc.loss.lmpo;
  if (!f.preset.empty()) {
    if (kind != LossKind::lmpo) throw UsageError("--preset applies to --loss lmpo only");
    apply_preset(lm, find_preset(f.preset));
  }
  if (f.lambda) lm.lambda = *f.lambda;
  if (f.log_h) lm.log_h = *f.log_h;
  lm.margin_variant = parse_margin_variant(f.variant);
  if (f.log_alpha) lm.log_alpha = *f.log_alpha;
  if (f.sigmoid_temp) lm.sigmoid_temp = *f.sigmoid_temp;
  lm.use_zscore = !f.no_zscore;
  lm.use_avg_len_norm = !f.no_lennorm;
  if (f.gamma) tc.loss.simpo.gamma_target = *f.gamma;
  if (f.beta) {
    lm.beta = *f.beta;
    tc.loss.simpo.beta = *f.beta;
    tc.loss.dpo.beta = *f.beta;
  }
  tc.learning_rate = f.lr;
  tc.steps = f.steps;
  tc.batch_size = f.batch;
  tc.eval_every = f.eval_every;
  tc.sample_max_len = f.sample_max_len;
  tc.ema_decay = f.ema_decay;
  tc.seed = f.seed;
  tc.validate();
  return tc;
}

std::string summary_line(const EvalSummary& s) {
  return "reward_acc=" + format_double(s.reward_accuracy) + " chosen_avg_lp=" +
         format_double(s.mean_chosen_avg_lp) + " rejected_avg_lp=" + format_double(s.mean_rejected_avg_lp) +
         " sample_len=" + format_double(s.mean_sampled_length);
}

// ---- gen-data --------------------------------------------------------------

struct GenFlags {
  GenSpec spec;
  std::string out;
};

void register_gen(CLI::App& app, GenFlags& f) {
  auto* sub = app.add_subcommand("gen-data", "Generate a synthetic preference dataset");
  auto& g = f.spec;
  sub->add_option("--vocab", g.vocab_size, "Vocabulary size");
  sub->add_option("--pairs", g.n_pairs, "Number of preference pairs");
  sub->add_option("--prompt-len", g.prompt_len, "Prompt length");
  sub->add_option("--chosen-min", g.chosen_len.lo, "Shortest chosen response");
  sub->add_option("--chosen-max", g.chosen_len.hi, "Longest chosen response");
  sub->add_option("--rejected-min", g.rejected_len.lo, "Shortest rejected response");
  sub->add_option("--rejected-max", g.rejected_len.hi, "Longest rejected response");
  sub->add_option("--sharpness", g.teacher_sharpness, "Teacher sharpness for chosen responses");
  sub->add_option("--noise-temp", g.noise_temp, "Sampling temperature for rejected responses");
  sub->add_flag("--length-bias", g.length_bias, "Draw rejected lengths from twice the chosen range");
  sub->add_option("--seed", g.seed, "Seed (default: $PREFOPT_SEED or 0)");
  sub->add_option("--out", f.out, "Output dataset path")->required();
}

int run_gen(const CLI::App& sub, GenFlags& f) {
  f.spec.validate();
  const fs::path out = f.out;
  const fs::path manifest = fs::path(f.out + ".manifest.json");
  write_manifest(manifest, sub, f.spec.seed, std::nullopt, {out});
  write_dataset(generate(f.spec), out);
  std::cout << "wrote " << f.spec.n_pairs << " pairs to " << out.generic_string() << "\n";
  return kOk;
}

// ---- train -----------------------------------------------------------------

struct TrainCmd {
  TrainFlags flags;
  std::string out;
};

void register_train(CLI::App& app, TrainCmd& c) {
  auto* sub = app.add_subcommand("train", "Train one policy and write metrics + checkpoint");
  add_train_flags(sub, c.flags, true);
  sub->add_option("--out", c.out, "Output directory")->required();
}

int run_train(const CLI::App& sub, TrainCmd& c) {
  auto tc = make_train_config(c.flags, parse_loss_kind(c.flags.loss));
  auto ds = read_dataset(c.flags.data);
  const fs::path dir = c.out;
  fs::create_directories(dir);
  const fs::path metrics = dir / "metrics.csv", ckpt = dir / "checkpoint.txt";
  write_manifest(dir / "manifest.json", sub, tc.seed, fs::path(c.flags.data), {metrics, ckpt});
  auto res = train(ds, tc);
  write_file_atomic(metrics, metrics_csv(res.metrics));
  write_checkpoint({res.policy, res.norm_state}, ckpt);
  const auto& last = res.metrics.back();
  std::cout << "steps=" << last.step << " loss=" << format_double(last.loss)
            << " chosen_avg_lp=" << format_double(last.chosen_avg_lp)
            << " rejected_avg_lp=" << format_double(last.rejected_avg_lp)
            << " reward_acc=" << format_double(last.reward_acc) << "\n";
  return kOk;
}

// ---- compare ---------------------------------------------------------------

struct CompareCmd {
  TrainFlags flags;
  std::string losses = "lmpo,simpo";
  std::string lambdas;
  std::string seeds;
  std::string out;
};

void register_compare(CLI::App& app, CompareCmd& c) {
  auto* sub = app.add_subcommand("compare", "Matched runs of several losses or LMPO lambdas, one wide CSV");
  add_train_flags(sub, c.flags, false);
  sub->add_option("--losses", c.losses, "Comma-separated losses");
  sub->add_option("--loss", c.flags.loss, "Loss for a --lambdas sweep (lmpo)");
  sub->add_option("--lambdas", c.lambdas, "Comma-separated LMPO lambda values");
  sub->add_option("--seeds", c.seeds, "Comma-separated seeds (default: --seed)");
  sub->add_option("--out", c.out, "Output CSV path")->required();
}

struct Run {
  std::string label;
  TrainConfig cfg;
};

int run_compare(const CLI::App& sub, CompareCmd& c) {
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(c.seeds)) {
    std::uint64_t v = 0;
    if (!parse_int(std::string_view(s), v)) throw UsageError("bad seed '" + s + "' in --seeds");
    seeds.push_back(v);
  }
  if (seeds.empty()) seeds.push_back(c.flags.seed);

  std::vector<Run> runs;
  if (!c.lambdas.empty()) {
    if (sub.count("--losses")) throw UsageError("--lambdas and --losses are mutually exclusive");
    if (parse_loss_kind(c.flags.loss) != LossKind::lmpo) throw UsageError("--lambdas requires --loss lmpo");
    for (auto seed : seeds)
      for (const auto& text : split_list(c.lambdas)) {
        double lam = 0;
        if (!parse_double(text, lam)) throw UsageError("bad lambda '" + text + "' in --lambdas");
        TrainFlags f = c.flags;
        f.lambda = lam;
        f.seed = seed;
        runs.push_back({"lmpo_lambda" + text + "_s" + std::to_string(seed), make_train_config(f, LossKind::lmpo)});
      }
  } else {
    auto kinds = split_list(c.losses);
    if (kinds.empty()) throw UsageError("--losses is empty");
    for (auto seed : seeds)
      for (const auto& k : kinds) {
        TrainFlags f = c.flags;
        f.seed = seed;
        auto kind = parse_loss_kind(k);
        if (kind != LossKind::lmpo) f.preset.clear();
        runs.push_back({k + "_s" + std::to_string(seed), make_train_config(f, kind)});
      }
  }

  auto ds = read_dataset(c.flags.data);
  const fs::path out = c.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_manifest(fs::path(c.out + ".manifest.json"), sub, seeds.front(), fs::path(c.flags.data), {out});

  static constexpr const char* kCols[] = {"loss", "chosen_avg_lp", "rejected_avg_lp", "margin_raw",
                                          "margin_norm", "reward_acc", "sample_len"};
  std::vector<std::vector<MetricsRow>> all;
  std::string header = "step";
  for (const auto& run : runs) {
    for (const char* col : kCols) header += "," + run.label + "/" + col;
    auto res = train(ds, run.cfg);
    auto ev = evaluate(res.policy, ds, {run.cfg.seed, run.cfg.sample_max_len});
    std::cout << "run=" << run.label << " " << summary_line(ev) << "\n";
    all.push_back(std::move(res.metrics));
  }
  std::string csv = header + "\n";
  for (std::size_t i = 0; i < all.front().size(); ++i) {
    csv += std::to_string(all.front()[i].step);
    for (const auto& rows : all) {
      const auto& r = rows[i];
      for (double v : {r.loss, r.chosen_avg_lp, r.rejected_avg_lp, r.margin_raw, r.margin_norm, r.reward_acc})
        csv += "," + format_double(v);
      csv += ",";
      if (r.sample_len) csv += format_double(*r.sample_len);
    }
    csv += "\n";
  }
  write_file_atomic(out, csv);
  return kOk;
}

// ---- grad-check ------------------------------------------------------------

struct GradCmd {
  GradCheckSpec spec;
  std::string variant;
  double tol = 1e-5;
};

void register_grad(CLI::App& app, GradCmd& c) {
  auto* sub = app.add_subcommand("grad-check", "Compare analytic gradients with central differences");
  sub->add_option("--trials", c.spec.trials, "Random instances");
  sub->add_option("--tol", c.tol, "Pass iff max_rel_err <= tol");
  sub->add_option("--variant", c.variant, "Check only LMPO with this margin variant");
  sub->add_option("--max-vocab", c.spec.max_vocab, "Largest vocabulary drawn");
  sub->add_option("--max-len", c.spec.max_len, "Longest sequence drawn");
  sub->add_option("--records", c.spec.records, "Preference pairs per instance");
  sub->add_option("--step", c.spec.step, "Central-difference step");
  sub->add_option("--seed", c.spec.seed, "Seed (default: $PREFOPT_SEED or 0)");
}

int run_grad(GradCmd& c) {
  if (!c.variant.empty()) c.spec.variant = parse_margin_variant(c.variant);
  if (!(c.tol >= 0)) throw UsageError("--tol must be >= 0");
  auto report = randomized_grad_check(c.spec);
  const bool pass = report.max_rel_err <= c.tol;
  std::cout << "trials=" << c.spec.trials << " " << format_report(report) << " tol=" << format_double(c.tol)
            << (pass ? " PASS" : " FAIL") << "\n";
  return pass ? kOk : kTolerance;
}

// ---- eval ------------------------------------------------------------------

struct EvalCmd {
  std::string checkpoint;
  std::string data;
  std::uint64_t seed = 0;
  std::size_t sample_max_len = 64;
};

void register_eval(CLI::App& app, EvalCmd& c) {
  auto* sub = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  sub->add_option("--checkpoint", c.checkpoint, "Checkpoint file")->required();
  sub->add_option("--data", c.data, "Dataset file")->required();
  sub->add_option("--seed", c.seed, "Seed for length sampling (default: $PREFOPT_SEED or 0)");
  sub->add_option("--sample-max-len", c.sample_max_len, "Cap on sampled response length");
}

int run_eval(EvalCmd& c) {
  auto ck = read_checkpoint(c.checkpoint);
  auto ds = read_dataset(c.data);
  if (ck.policy.vocab_size() != ds.vocab_size) throw ParseError("checkpoint vocab does not match dataset", 1);
  for (const auto& r : ds.records) validate_record(r, ds.vocab_size);
  if (c.sample_max_len < 1) throw UsageError("--sample-max-len must be >= 1");
  std::cout << summary_line(evaluate(ck.policy, ds, {c.seed, c.sample_max_len})) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Preference-optimization lab over a bigram softmax policy"};
  app.set_version_flag("--version", std::string(PREFOPT_VERSION));
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  GenFlags gen;
  TrainCmd tr;
  CompareCmd cmp;
  GradCmd gc;
  EvalCmd ev;
  try {
    const std::uint64_t seed = default_seed();
    gen.spec.seed = tr.flags.seed = cmp.flags.seed = gc.spec.seed = ev.seed = seed;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  register_gen(app, gen);
  register_train(app, tr);
  register_compare(app, cmp);
  register_grad(app, gc);
  register_eval(app, ev);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "gen-data") return run_gen(*sub, gen);
    if (name == "train") return run_train(*sub, tr);
    if (name == "compare") return run_compare(*sub, cmp);
    if (name == "grad-check") return run_grad(gc);
    return run_eval(ev);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const InputDomainError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error at step " << e.step() << ": " << e.what() << "\n";
    return kNumeric;
  } catch (const ParseError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  }
}
