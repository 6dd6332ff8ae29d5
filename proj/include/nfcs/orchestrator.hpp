#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nfcs/controller.hpp"
#include "nfcs/cost_model.hpp"
#include "nfcs/toyland.hpp"

namespace nfcs {

// Runs the whole pipeline: dataset + backbone preparation with feature
// caching, per-architecture proxy training, PPO-driven progressive search,
// top-K selection, and the analysis passes (sharing trend, reward/AP
// correlation, ablations).

struct SearchPlan {
  uint64_t seed = 1;
  // dataset
  int n_images = 1000;
  int image_size = 128;
  int num_classes = 3;
  double train_fraction = 0.7;
  // proxy task
  int proxy_iterations = 300;
  int proxy_batch = 16;
  double adam_lr = 8e-4;
  double polyak_decay = 0.9;
  int fpn_width = 64;
  int head_width = 128;
  std::string fpn_norm = "bn";  // bn | gn
  // backbone preparation (one-off)
  int backbone_iterations = 300;
  int backbone_batch = 8;
  double backbone_lr = 8e-4;
  // search
  int archs_fpn = 2800;
  int archs_head = 600;
  int controller_batch = 10;
  int top_k_fpn = 20;
  int top_k_head = 10;
  std::string reward_mode = "negloss";  // negloss | toyap
  std::string space_mode = "fh";        // f | h | fh
  // toy AP decoding
  double score_thresh = 0.05;
  double nms_iou = 0.5;
  // controller
  int ctrl_hidden = 64;
  int ctrl_embedding = 32;
  double ctrl_clip = 0.2;
  int ctrl_ppo_epochs = 3;
  double ctrl_entropy = 0.01;
  double ctrl_baseline_decay = 0.95;
  double ctrl_lr = 3.5e-4;
  // execution
  int jobs = 1;
  std::string cache_dir = "cache";

  PolicyConfig policy() const;
  nlohmann::json to_json() const;
  static SearchPlan from_json(const nlohmann::json& j);
  static SearchPlan load(const std::string& path);
  // hash over the canonical serialization; names caches, guards the wire
  std::string hash() const;
  CompileOptions compile_options() const;
};

struct PreparedTask {
  SearchPlan plan;
  std::vector<SynthImage> dataset;
  std::vector<int> train_idx, val_idx;
  std::vector<std::array<Tensor, 3>> features;  // cached backbone outputs
  std::vector<PyramidTargets> targets;
  uint64_t backbone_hash = 0;
  std::array<FeatureSpec, 3> backbone_spec{};
  bool cache_hit = false;

  std::array<FeatureSpec, kNumLevels> pyramid_spec() const {
    return pyramid_spec_from(backbone_spec, plan.fpn_width);
  }
};

// Builds (or loads) dataset, backbone and the feature cache. With
// require_cache the expensive backbone step must already be cached;
// a miss raises an error that names the `prepare` step.
PreparedTask prepare(const SearchPlan& plan, bool require_cache = false);

// Toy backbone: 4 stages to strides 8/16/32, widths 32/64/128/128; trained
// once against the original decoder, then frozen.
Params init_backbone_params(Rng& rng);
std::array<TapeF::Value, 3> backbone_forward(
    TapeF& tape, Params& params, TapeF::Value images, bool training,
    std::map<std::string, TapeF::Value>* bound_out = nullptr);

// ---- evaluation jobs ----

struct EvalJob {
  int64_t seq = 0;
  SearchStage stage = SearchStage::FpnOnly;
  std::vector<int> tokens;
  // head-stage context: which FPN produced the prefetched features
  // (empty = the original FPN) and the replay seed that trained it
  std::vector<int> fpn_tokens;
  uint64_t fpn_seed = 0;
  uint64_t seed = 0;
  bool compute_ap = false;
};

constexpr double kDivergedReward = -1e300;

struct EvalOutcome {
  int64_t seq = 0;
  double reward = kDivergedReward;
  LossTerms val_losses{};
  double toy_ap = -1;
  uint64_t macs = 0;
  uint64_t params = 0;
  std::string status = "error";  // ok | diverged | error:<msg>
  uint64_t wall_ms = 0;
  std::string worker = "local";
};

// Pure function of (prepared, plan, job): trains a fresh decoder on the
// meta-train features and scores it on meta-val. Safe to call concurrently.
EvalOutcome evaluate_job(const PreparedTask& prepared, const SearchPlan& plan,
                         const EvalJob& job);

// Replays an architecture with a custom budget; used by the correlation and
// ablation studies. Always computes toy AP.
EvalOutcome evaluate_job_with_budget(const PreparedTask& prepared,
                                     const SearchPlan& plan, const EvalJob& job,
                                     int iterations);

class EvalService {
 public:
  virtual ~EvalService() = default;
  // Results come back seq-sorted regardless of completion order.
  virtual std::vector<EvalOutcome> run(const std::vector<EvalJob>& jobs) = 0;
};

// In-process execution over a small thread pool.
class LocalEvalService : public EvalService {
 public:
  LocalEvalService(const PreparedTask& prepared, int jobs);
  std::vector<EvalOutcome> run(const std::vector<EvalJob>& jobs) override;

 private:
  const PreparedTask& prepared_;
  int jobs_;
};

// ---- search records / log ----

struct SearchRecord {
  int64_t seq = 0;
  std::string stage;  // "fpn" | "head"
  std::vector<int> tokens;
  double reward = 0;
  double cls = 0, reg = 0, ctr = 0;
  double toy_ap = -1;
  uint64_t macs = 0;
  uint64_t params = 0;
  std::string status = "ok";
  uint64_t wall_ms = 0;  // telemetry; kept out of the canonical log line

  nlohmann::json to_json() const;  // canonical (deterministic) fields only
  static SearchRecord from_json(const nlohmann::json& j);
};

std::string records_to_jsonl(const std::vector<SearchRecord>& records);
std::vector<SearchRecord> read_jsonl(const std::string& path);

struct SearchResult {
  std::vector<SearchRecord> log;
  std::vector<SearchRecord> top_fpn;   // stage-1 ranking
  std::vector<SearchRecord> top_head;  // stage-2 ranking
  std::vector<int> best_fpn_tokens;
  uint64_t best_fpn_seed = 0;
};

// Progressive search. Writes the JSONL log (plus a .times telemetry sidecar
// and a .state resume file) under `run_dir`; resumes from them when present.
SearchResult run_progressive_search(const PreparedTask& prepared,
                                    EvalService& service,
                                    const std::string& run_dir,
                                    std::function<bool(int64_t)> keep_going = {});

// Top-k by reward, ties to the earlier sequence number.
std::vector<SearchRecord> top_k(const std::vector<SearchRecord>& records,
                                const std::string& stage, int k);

// Fraction of fully shared heads (share token 0) per 50-record window.
std::vector<double> sharing_trend(const std::vector<SearchRecord>& records,
                                  int window = 50);

struct CorrelationResult {
  struct Point {
    int64_t seq;
    double reward;
    double toy_ap;
  };
  std::vector<Point> points;
  double spearman = 0;
  // constant rewards or constant APs leave rho undefined; reported as 0
  bool degenerate = false;
};

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b);

// Replays n log architectures spanning the reward range with a longer budget
// and correlates proxy reward with held-out toy AP.
CorrelationResult correlation_study(const PreparedTask& prepared,
                                    const std::vector<SearchRecord>& log,
                                    const SearchResult* ctx, int n,
                                    int long_budget);

struct AblationReport {
  std::string name;
  nlohmann::json details;
};

// DeformFPN baseline: original decoder with deformable FPN convs, proxy
// trained and scored like any candidate.
AblationReport deform_fpn_baseline(const PreparedTask& prepared);

}  // namespace nfcs
