#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nfcs/params.hpp"
#include "nfcs/search_space.hpp"
#include "nfcs/tape.hpp"

namespace nfcs {

// Autoregressive LSTM policy over a token space, trained with the clipped
// PPO surrogate on architecture rewards. One controller serves one stage
// (the progressive search uses a fresh instance per stage).

template <typename T>
struct PolicyConfigT {
  int hidden_size = 64;
  int embedding_size = 32;
  T clip_epsilon = T(0.2);
  int ppo_epochs = 3;
  int batch_archs = 10;
  T entropy_coef = T(0.01);
  T baseline_decay = T(0.95);
  T lr = T(3.5e-4);
};

template <typename T>
struct SampleBatchT {
  std::vector<std::vector<int>> tokens;          // per architecture
  std::vector<std::vector<T>> old_logp;          // per architecture, per token
  std::vector<double> rewards;                   // filled by the evaluator
  std::vector<double> advantages;                // reward - baseline at sampling
  size_t size() const { return tokens.size(); }
};

struct PpoStats {
  double surrogate = 0;
  double entropy = 0;
  double mean_ratio = 0;
  double baseline = 0;
};

template <typename T>
class ControllerT {
 public:
  using TapeT = Tape<T>;
  using Value = typename TapeT::Value;

  ControllerT(ActionSpace space, PolicyConfigT<T> cfg, uint64_t init_seed)
      : space_(std::move(space)), cfg_(cfg) {
    NFCS_REQUIRE(cfg_.clip_epsilon > T(0) && cfg_.clip_epsilon < T(1),
                 "clip epsilon outside (0,1)");
    Rng rng(Rng::derive(init_seed, 0x9c0ffee));
    int e = cfg_.embedding_size, h = cfg_.hidden_size;
    params_.add("emb.start", TensorT<T>::randn({1, e}, rng, 0.1));
    params_.add("lstm.w_ih", TensorT<T>::randn({4 * h, e}, rng, 1.0 / std::sqrt(e)));
    params_.add("lstm.w_hh", TensorT<T>::randn({4 * h, h}, rng, 1.0 / std::sqrt(h)));
    params_.add("lstm.b", TensorT<T>::zeros({4 * h}));
    for (int k = 0; k < space_.length(); k++) {
      int v = space_.vocab_sizes[static_cast<size_t>(k)];
      params_.add(key("emb", k), TensorT<T>::randn({v, e}, rng, 0.1));
      // zero projections start every position exactly uniform
      params_.add(key("proj", k) + ".w", TensorT<T>::zeros({h, v}));
      params_.add(key("proj", k) + ".b", TensorT<T>::zeros({v}));
    }
  }

  const ActionSpace& space() const { return space_; }
  const PolicyConfigT<T>& config() const { return cfg_; }
  ParamsT<T>& params() { return params_; }
  double baseline() const { return baseline_; }
  int64_t updates() const { return update_count_; }

  // Draws n token sequences; read-only on the policy parameters.
  SampleBatchT<T> sample(Rng& rng, int n) {
    NFCS_REQUIRE(n >= 1, "sample batch must be positive");
    TapeT tape(false);
    SampleBatchT<T> batch;
    batch.tokens.assign(static_cast<size_t>(n), {});
    batch.old_logp.assign(static_cast<size_t>(n), {});
    int h = cfg_.hidden_size;
    Value hs = tape.constant(TensorT<T>::zeros({n, h}));
    Value cs = tape.constant(TensorT<T>::zeros({n, h}));
    Value w_ih = tape.constant(params_.get("lstm.w_ih"));
    Value w_hh = tape.constant(params_.get("lstm.w_hh"));
    Value b = tape.constant(params_.get("lstm.b"));
    TensorT<T> start = TensorT<T>::zeros({n, cfg_.embedding_size});
    for (int i = 0; i < n; i++)
      for (int j = 0; j < cfg_.embedding_size; j++)
        start[static_cast<size_t>(i) * cfg_.embedding_size + j] =
            params_.get("emb.start")[static_cast<size_t>(j)];
    Value x = tape.constant(start);
    for (int k = 0; k < space_.length(); k++) {
      auto [h2, c2] = tape.lstm_cell(x, hs, cs, w_ih, w_hh, b);
      hs = h2;
      cs = c2;
      Value logits = tape.add_rowvec(
          tape.matmul(hs, tape.constant(params_.get(key("proj", k) + ".w"))),
          tape.constant(params_.get(key("proj", k) + ".b")));
      Value logp = tape.log_softmax(logits);
      int v = space_.vocab_sizes[static_cast<size_t>(k)];
      std::vector<int> picks(static_cast<size_t>(n));
      for (int i = 0; i < n; i++) {
        double u = rng.uniform();
        double acc = 0;
        int pick = v - 1;
        for (int j = 0; j < v; j++) {
          acc += std::exp(static_cast<double>(logp->value[static_cast<size_t>(i) * v + j]));
          if (u < acc) {
            pick = j;
            break;
          }
        }
        picks[static_cast<size_t>(i)] = pick;
        batch.tokens[static_cast<size_t>(i)].push_back(pick);
        batch.old_logp[static_cast<size_t>(i)].push_back(
            logp->value[static_cast<size_t>(i) * v + pick]);
      }
      x = tape.embedding(tape.constant(params_.get(key("emb", k))), picks);
    }
    return batch;
  }

  // Clipped-surrogate loss (negated for the minimizer) over a filled batch.
  // Exposed so tests can finite-difference it against the analytic gradient.
  Value build_ppo_loss(TapeT& tape, const SampleBatchT<T>& batch,
                       std::map<std::string, Value>* bound_out) {
    int n = static_cast<int>(batch.size());
    int len = space_.length();
    std::map<std::string, Value> bound;
    auto bind = [&](const std::string& name) {
      auto it = bound.find(name);
      if (it != bound.end()) return it->second;
      Value v = tape.leaf(params_.get(name), true);
      bound.emplace(name, v);
      return v;
    };

    int h = cfg_.hidden_size, e = cfg_.embedding_size;
    Value hs = tape.constant(TensorT<T>::zeros({n, h}));
    Value cs = tape.constant(TensorT<T>::zeros({n, h}));
    Value w_ih = bind("lstm.w_ih");
    Value w_hh = bind("lstm.w_hh");
    Value b = bind("lstm.b");
    // start embedding row repeated over the batch
    Value start = bind("emb.start");
    Value x = tape.embedding(start, std::vector<int>(static_cast<size_t>(n), 0));
    (void)e;

    TensorT<T> adv = TensorT<T>::zeros({n});
    for (int i = 0; i < n; i++)
      adv[static_cast<size_t>(i)] = static_cast<T>(batch.advantages[static_cast<size_t>(i)]);
    Value advv = tape.constant(adv);

    Value surrogate_sum = nullptr;
    Value entropy_sum = nullptr;
    for (int k = 0; k < len; k++) {
      auto [h2, c2] = tape.lstm_cell(x, hs, cs, w_ih, w_hh, b);
      hs = h2;
      cs = c2;
      int v = space_.vocab_sizes[static_cast<size_t>(k)];
      Value logits = tape.add_rowvec(tape.matmul(hs, bind(key("proj", k) + ".w")),
                                     bind(key("proj", k) + ".b"));
      for (size_t q = 0; q < logits->value.numel(); q++)
        NFCS_REQUIRE(std::isfinite(static_cast<double>(logits->value[q])),
                     "NaN/Inf in policy logits at position ", k,
                     "; aborting ppo update");
      Value logp_all = tape.log_softmax(logits);
      TensorT<T> onehot = TensorT<T>::zeros({n, v});
      TensorT<T> oldlp = TensorT<T>::zeros({n});
      std::vector<int> picks(static_cast<size_t>(n));
      for (int i = 0; i < n; i++) {
        int tok = batch.tokens[static_cast<size_t>(i)][static_cast<size_t>(k)];
        onehot[static_cast<size_t>(i) * v + tok] = T(1);
        oldlp[static_cast<size_t>(i)] = batch.old_logp[static_cast<size_t>(i)][static_cast<size_t>(k)];
        picks[static_cast<size_t>(i)] = tok;
      }
      Value logp_new = tape.rowsum(tape.mul(logp_all, tape.constant(onehot)));
      Value ratio = tape.exp(tape.sub(logp_new, tape.constant(oldlp)));
      Value unclipped = tape.mul(ratio, advv);
      Value clipped = tape.mul(
          tape.clamp(ratio, T(1) - cfg_.clip_epsilon, T(1) + cfg_.clip_epsilon), advv);
      Value obj = tape.sum(tape.minimum(unclipped, clipped));
      surrogate_sum = surrogate_sum ? tape.add(surrogate_sum, obj) : obj;

      Value ent = tape.mul_scalar(
          tape.sum(tape.mul(tape.softmax(logits), logp_all)), T(-1));
      entropy_sum = entropy_sum ? tape.add(entropy_sum, ent) : ent;

      x = tape.embedding(bind(key("emb", k)), picks);
    }
    T inv = T(1) / static_cast<T>(n * len);
    Value surrogate = tape.mul_scalar(surrogate_sum, inv);
    Value entropy = tape.mul_scalar(entropy_sum, inv);
    last_surrogate_ = static_cast<double>(surrogate->value[0]);
    last_entropy_ = static_cast<double>(entropy->value[0]);
    Value objective = tape.add(surrogate, tape.mul_scalar(entropy, cfg_.entropy_coef));
    if (bound_out) *bound_out = std::move(bound);
    return tape.mul_scalar(objective, T(-1));
  }

  // Fills advantages from the current baseline, runs the configured PPO
  // epochs, then folds the batch mean reward into the baseline EMA.
  PpoStats ppo_update(SampleBatchT<T>& batch) {
    NFCS_REQUIRE(!batch.tokens.empty(), "empty ppo batch");
    NFCS_REQUIRE(batch.rewards.size() == batch.tokens.size(),
                 "batch rewards not populated");
    double mean_reward = 0;
    for (double r : batch.rewards) mean_reward += r;
    mean_reward /= static_cast<double>(batch.rewards.size());
    if (!baseline_init_) {
      baseline_ = mean_reward;
      baseline_init_ = true;
    }
    batch.advantages.resize(batch.rewards.size());
    for (size_t i = 0; i < batch.rewards.size(); i++)
      batch.advantages[i] = batch.rewards[i] - baseline_;

    PpoStats stats;
    for (int epoch = 0; epoch < cfg_.ppo_epochs; epoch++) {
      TapeT tape;
      std::map<std::string, Value> bound;
      Value loss = build_ppo_loss(tape, batch, &bound);
      tape.backward(loss);
      std::map<std::string, TensorT<T>> grads;
      for (auto& [name, node] : bound)
        if (node->grad.defined()) grads.emplace(name, node->grad);
      adam_t_++;
      adam_step<T>(params_, grads, cfg_.lr, T(0.9), T(0.999), T(1e-8), adam_t_);
      if (epoch == 0) {
        stats.surrogate = last_surrogate_;
        stats.entropy = last_entropy_;
      }
    }
    baseline_ = cfg_.baseline_decay * baseline_ +
                (1.0 - cfg_.baseline_decay) * mean_reward;
    update_count_++;
    stats.baseline = baseline_;
    stats.mean_ratio = 1.0;  // by construction on the first epoch
    return stats;
  }

  void preset_baseline(double b) {
    baseline_ = b;
    baseline_init_ = true;
  }

  void save(const std::string& path) const {
    ParamsT<T> all = params_.clone_values();
    for (const auto& [name, e] : params_.entries()) {
      if (e.m.defined()) {
        all.add("adam.m." + name, e.m.clone(), true);
        all.add("adam.v." + name, e.v.clone(), true);
      }
    }
    save_params_file(all, path);
    nlohmann::json side;
    side["version"] = 1;
    side["hidden_size"] = cfg_.hidden_size;
    side["embedding_size"] = cfg_.embedding_size;
    side["clip_epsilon"] = static_cast<double>(cfg_.clip_epsilon);
    side["ppo_epochs"] = cfg_.ppo_epochs;
    side["batch_archs"] = cfg_.batch_archs;
    side["entropy_coef"] = static_cast<double>(cfg_.entropy_coef);
    side["baseline_decay"] = static_cast<double>(cfg_.baseline_decay);
    side["lr"] = static_cast<double>(cfg_.lr);
    side["stage"] = stage_name(space_.stage);
    side["vocab_sizes"] = space_.vocab_sizes;
    side["baseline"] = baseline_;
    side["baseline_init"] = baseline_init_;
    side["adam_t"] = adam_t_;
    side["updates"] = update_count_;
    std::ofstream f(path + ".json");
    NFCS_REQUIRE(f.good(), "cannot write sidecar '", path, ".json'");
    f << side.dump(2) << "\n";
  }

  void load(const std::string& path) {
    std::ifstream f(path + ".json");
    NFCS_REQUIRE(f.good(), "missing controller sidecar '", path, ".json'");
    nlohmann::json side = nlohmann::json::parse(f);
    NFCS_REQUIRE(side.at("version").get<int>() == 1,
                 "unsupported controller checkpoint version");
    NFCS_REQUIRE(side.at("vocab_sizes").get<std::vector<int>>() == space_.vocab_sizes,
                 "controller checkpoint was trained on a different action space");
    NFCS_REQUIRE(side.at("hidden_size").get<int>() == cfg_.hidden_size &&
                     side.at("embedding_size").get<int>() == cfg_.embedding_size,
                 "controller checkpoint has mismatched policy dimensions");
    ParamsT<T> all = load_params_file<T>(path);
    for (auto& [name, e] : params_.entries()) {
      e.value = all.get(name).clone();
      if (all.has("adam.m." + name)) {
        e.m = all.get("adam.m." + name).clone();
        e.v = all.get("adam.v." + name).clone();
      } else {
        e.m = {};
        e.v = {};
      }
    }
    baseline_ = side.at("baseline").get<double>();
    baseline_init_ = side.at("baseline_init").get<bool>();
    adam_t_ = side.at("adam_t").get<int64_t>();
    update_count_ = side.at("updates").get<int64_t>();
  }

 private:
  static std::string key(const char* base, int k) {
    return std::string(base) + "." + std::to_string(k);
  }

  ActionSpace space_;
  PolicyConfigT<T> cfg_;
  ParamsT<T> params_;
  double baseline_ = 0;
  bool baseline_init_ = false;
  int64_t adam_t_ = 0;
  int64_t update_count_ = 0;
  double last_surrogate_ = 0;
  double last_entropy_ = 0;
};

using PolicyConfig = PolicyConfigT<float>;
using SampleBatch = SampleBatchT<float>;
using Controller = ControllerT<float>;

}  // namespace nfcs
