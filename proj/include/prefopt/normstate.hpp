#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>

#include "prefopt/error.hpp"

namespace prefopt {

/// Running Z-score statistics of the margin. The first batch initializes
/// the mean/std directly; later batches blend in with weight (1 - decay).
/// Both statistics are treated as constants by the gradient code.
class EmaNormState {
 public:
  static constexpr double kDefaultDecay = 0.9;
  static constexpr double kDefaultEpsilon = 1e-8;

  explicit EmaNormState(double decay = kDefaultDecay, double epsilon = kDefaultEpsilon)
      : decay_(decay), epsilon_(epsilon) {
    if (!(decay > 0.0 && decay < 1.0)) throw InputDomainError("ema decay must be in (0, 1)");
    if (!(epsilon > 0.0)) throw InputDomainError("ema epsilon must be > 0");
  }

  // Restores a serialized state.
  static EmaNormState restore(double mean, double std, double decay, double epsilon,
                              std::size_t step, bool initialized) {
    EmaNormState s(decay, epsilon);
    if (initialized && !(std >= epsilon)) throw InputDomainError("ema std below epsilon");
    s.mean_ = mean;
    s.std_ = std;
    s.step_ = step;
    s.initialized_ = initialized;
    return s;
  }

  // Population mean/std of the batch, blended into the running estimates.
  void update(std::span<const double> batch_margins) {
    if (batch_margins.empty()) throw InputDomainError("ema update needs a non-empty batch");
    const double n = static_cast<double>(batch_margins.size());
    double mu = 0.0;
    for (double m : batch_margins) mu += m;
    mu /= n;
    double var = 0.0;
    for (double m : batch_margins) var += (m - mu) * (m - mu);
    double sigma = std::sqrt(var / n);

    if (!initialized_) {
      mean_ = mu;
      std_ = sigma;
      initialized_ = true;
    } else {
      mean_ = decay_ * mean_ + (1.0 - decay_) * mu;
      std_ = decay_ * std_ + (1.0 - decay_) * sigma;
    }
    std_ = std::max(std_, epsilon_);
    ++step_;
  }

  double normalize(double m) const {
    if (!initialized_) throw StateError("normalize called before any ema update");
    return (m - mean_) / std_;
  }

  double mean() const noexcept { return mean_; }
  double std() const noexcept { return std_; }
  double decay() const noexcept { return decay_; }
  double epsilon() const noexcept { return epsilon_; }
  std::size_t step() const noexcept { return step_; }
  bool initialized() const noexcept { return initialized_; }

  friend bool operator==(const EmaNormState&, const EmaNormState&) = default;

 private:
  double mean_ = 0.0;
  double std_ = 1.0;
  double decay_;
  double epsilon_;
  std::size_t step_ = 0;
  bool initialized_ = false;
};

}  // namespace prefopt
