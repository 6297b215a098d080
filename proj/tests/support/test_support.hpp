#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqrec/encoder.hpp"
#include "seqrec/rng.hpp"
#include "seqrec/tensor.hpp"

namespace seqrec::testing {

inline std::vector<double> uniform_values(std::size_t count, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(count);
  for (double& x : v) x = lo + (hi - lo) * rng.uniform();
  return v;
}

inline Tensor random_parameter(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = shape_numel(shape);
  return Tensor::parameter(std::move(shape), uniform_values(n, rng, lo, hi));
}

inline Tensor random_constant(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = shape_numel(shape);
  return Tensor::from(std::move(shape), uniform_values(n, rng, lo, hi));
}

// Every weight redrawn so that gains, biases and the Q head carry signal too.
inline EncoderParams randomized_model(const EncoderConfig& config, std::uint64_t seed) {
  EncoderParams p = EncoderParams::init(config, seed);
  CounterRng rng(seed ^ 0x5eedULL);
  for (auto& nt : p.named()) {
    const bool gain = nt.name.find("gain") != std::string::npos;
    for (double& v : nt.tensor.mutable_data()) v = gain ? 0.5 + rng.uniform() : rng.uniform() - 0.5;
  }
  p.zero_pad_row();
  return p;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

struct GradReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

/// Central finite differences of `loss` against the tape gradient for every
/// element of `params`. `loss` must rebuild its graph from the current values.
inline GradReport check_gradients(std::vector<std::pair<std::string, Tensor>> params,
                                  const std::function<Tensor()>& loss, double step = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    GradientTape tape;
    TapeScope scope(tape);
    for (auto& [name, t] : params) t.zero_grad();
    const Tensor out = loss();
    tape.backward(out);
    for (auto& [name, t] : params) {
      if (t.has_grad()) {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
      } else {
        analytic.emplace_back(t.numel(), 0.0);
      }
      t.zero_grad();
    }
  }
  GradReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto data = params[p].second.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double up = loss().item();
      data[i] = saved - step;
      const double down = loss().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(analytic[p][i], numeric);
      ++report.checked;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst = params[p].first + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic[p][i]) +
                       " numeric " + std::to_string(numeric);
      }
    }
  }
  return report;
}

inline std::vector<std::pair<std::string, Tensor>> model_tensors(const EncoderParams& p) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& nt : p.named()) out.emplace_back(nt.name, nt.tensor);
  return out;
}

// Fixed random weights turn any tensor into a scalar with non-uniform gradients.
inline Tensor weighted_sum(const Tensor& x, std::uint64_t seed) {
  CounterRng rng(seed);
  return sum(x * random_constant(x.shape(), rng));
}

// Pearson statistic of observed counts against a uniform expectation.
inline double chi_square_uniform(const std::vector<std::size_t>& counts) {
  std::size_t total = 0;
  for (std::size_t c : counts) total += c;
  const double expected = static_cast<double>(total) / static_cast<double>(counts.size());
  double stat = 0.0;
  for (std::size_t c : counts) stat += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) / expected;
  return stat;
}

// Upper 0.001 quantiles of the chi-square distribution by degrees of freedom.
inline double chi_square_critical_001(std::size_t dof) {
  switch (dof) {
    case 4: return 18.467;
    case 17: return 40.790;
    case 19: return 43.820;
    case 23: return 49.728;
    default: throw std::invalid_argument("no pinned critical value for dof " + std::to_string(dof));
  }
}

}  // namespace seqrec::testing
