#pragma once

#include <functional>
#include <vector>

#include "nfcs/tape.hpp"

namespace nfcs::testutil {

// Central finite-difference gradient oracle. `build` reconstructs the scalar
// loss from leaf values on a fresh tape, so it is evaluated independently of
// the adjoints it checks. Returns the worst hybrid abs/rel error over every
// element of every input.
struct GradCheck {
  using TapeD = Tape<double>;
  using Builder =
      std::function<TapeD::Value(TapeD&, const std::vector<TapeD::Value>&)>;

  static double max_err(std::vector<TensorD> inputs, const Builder& build,
                        double h = 1e-5) {
    TapeD tape;
    std::vector<TapeD::Value> leaves;
    for (auto& t : inputs) leaves.push_back(tape.leaf(t.clone(), true));
    TapeD::Value loss = build(tape, leaves);
    tape.backward(loss);
    std::vector<TensorD> analytic;
    for (auto* l : leaves)
      analytic.push_back(l->grad.defined() ? l->grad.clone()
                                           : TensorD::zeros(l->value.shape()));

    auto eval = [&](const std::vector<TensorD>& xs) {
      TapeD t2(false);
      std::vector<TapeD::Value> ls;
      for (const auto& x : xs) ls.push_back(t2.leaf(x.clone(), false));
      return build(t2, ls)->value[0];
    };

    double worst = 0.0;
    for (size_t i = 0; i < inputs.size(); i++) {
      for (size_t j = 0; j < inputs[i].numel(); j++) {
        double orig = inputs[i][j];
        inputs[i][j] = orig + h;
        double fp = eval(inputs);
        inputs[i][j] = orig - h;
        double fm = eval(inputs);
        inputs[i][j] = orig;
        double numeric = (fp - fm) / (2.0 * h);
        double a = analytic[i][j];
        double err = std::abs(a - numeric) /
                     std::max({1.0, std::abs(a), std::abs(numeric)});
        worst = std::max(worst, err);
      }
    }
    return worst;
  }
};

// Scalarizes a tensor output with fixed random weights so one backward probes
// every output element.
inline Tape<double>::Value weighted_sum(Tape<double>& tape,
                                        Tape<double>::Value v, Rng& rng) {
  TensorD w = TensorD::zeros(v->value.shape());
  for (size_t i = 0; i < w.numel(); i++) w[i] = rng.uniform(-1.0, 1.0);
  return tape.sum(tape.mul(v, tape.constant(w)));
}

}  // namespace nfcs::testutil
