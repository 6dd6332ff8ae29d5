#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "nfcs/params.hpp"
#include "nfcs/search_space.hpp"
#include "nfcs/tape.hpp"

namespace nfcs {

// Pyramid levels are p3..p7 with strides 8..128 relative to the input image.
constexpr int kNumLevels = 5;
constexpr std::array<int, kNumLevels> kLevelStrides{8, 16, 32, 64, 128};

struct FeatureSpec {
  int stride = 1;
  int channels = 0;
  int height = 0;
  int width = 0;

  bool operator==(const FeatureSpec&) const = default;
};

inline int stride_dim(int image_dim, int stride) {
  return (image_dim + stride - 1) / stride;
}

inline FeatureSpec feature_at(int image_h, int image_w, int stride, int channels) {
  return {stride, channels, stride_dim(image_h, stride), stride_dim(image_w, stride)};
}

enum class NormKind { None, Batch, Group };

struct CompileOptions {
  NormKind fpn_norm = NormKind::Batch;  // switchable to Group for tiny batches
  int gn_groups = 8;
};

struct Widths {
  int fpn = 64;
  int head = 128;
};

// Executable DAG node. Nodes are stored in topological (creation) order;
// the same config always compiles to the same node sequence.
struct GraphNode {
  enum class Op { Input, Conv, SepConv, DeformConv, Skip, Sum, Concat, Resize };
  Op op = Op::Input;
  std::vector<int> inputs;
  FeatureSpec out;
  int kernel = 1;
  int stride = 1;
  int dilation = 1;
  NormKind norm = NormKind::None;
  int norm_groups = 8;
  bool relu = false;
  // nodes with the same prefix share one parameter set (head weight sharing)
  std::string param_prefix;
  std::string label;
};

struct GlobalMerge {
  int block_t = 0;             // dangling block index (1-based, < 5)
  int source_node = -1;        // the dangling block's output node
  std::array<int, 3> add_nodes{-1, -1, -1};  // resulting p3*,p4*,p5* nodes
};

struct DecoderGraph {
  std::vector<GraphNode> nodes;
  std::vector<int> input_nodes;                    // c3,c4,c5 or p3..p7
  std::array<int, kNumLevels> pyramid_nodes{-1, -1, -1, -1, -1};
  std::vector<GlobalMerge> global_merges;
  std::vector<bool> head_partition;                // true = per-level weights
  struct LevelHead {
    int cls = -1, reg = -1, ctr = -1;              // raw projection nodes
  };
  std::array<LevelHead, kNumLevels> head_outputs;
  int num_classes = 0;
  Widths widths;

  int add(GraphNode n) {
    nodes.push_back(std::move(n));
    return static_cast<int>(nodes.size()) - 1;
  }
  const GraphNode& at(int i) const { return nodes[static_cast<size_t>(i)]; }
  bool has_head() const { return head_outputs[0].cls >= 0; }
};

// ---- compilation ----

// Full decoder: searched FPN + searched head.
DecoderGraph compile(const DecoderConfig& config,
                     const std::array<FeatureSpec, 3>& backbone_spec,
                     Widths widths, int num_classes,
                     const CompileOptions& opts = {});

// Searched FPN + original FCOS head (stage-1 search).
DecoderGraph compile_with_original_head(const FpnConfig& fpn,
                                        const std::array<FeatureSpec, 3>& backbone_spec,
                                        Widths widths, int num_classes,
                                        const CompileOptions& opts = {});

// Original FPN + searched head (h-only ablation).
DecoderGraph compile_with_original_fpn(const HeadConfig& head,
                                       const std::array<FeatureSpec, 3>& backbone_spec,
                                       Widths widths, int num_classes,
                                       const CompileOptions& opts = {});

// Searched head over externally supplied pyramid features (stage-2 search
// against prefetched FPN outputs). Inputs are p3..p7 at fpn width.
DecoderGraph compile_head_only(const HeadConfig& head,
                               const std::array<FeatureSpec, kNumLevels>& pyramid_spec,
                               int head_width, int num_classes,
                               const CompileOptions& opts = {});

DecoderGraph compile_original_head_only(const std::array<FeatureSpec, kNumLevels>& pyramid_spec,
                                        int head_width, int num_classes,
                                        const CompileOptions& opts = {});

// FPN subgraph alone (outputs p3..p7, no head); used to prefetch features.
DecoderGraph compile_fpn_only(const FpnConfig& fpn,
                              const std::array<FeatureSpec, 3>& backbone_spec,
                              int fpn_width, const CompileOptions& opts = {});

// Canonical p3..p7 specs for the image size implied by the backbone features.
std::array<FeatureSpec, kNumLevels> pyramid_spec_from(
    const std::array<FeatureSpec, 3>& backbone_spec, int width);

// Baseline FCOS decoder: top-down FPN with lateral 1x1s plus two shared
// 4-conv towers.
DecoderGraph original_fcos_decoder(const std::array<FeatureSpec, 3>& backbone_spec,
                                   Widths widths, int num_classes,
                                   const CompileOptions& opts = {});

// DeformFPN baseline: the original decoder with every 3x3 FPN conv swapped
// for a deformable 3x3.
DecoderGraph deform_fpn_decoder(const std::array<FeatureSpec, 3>& backbone_spec,
                                Widths widths, int num_classes,
                                const CompileOptions& opts = {});

// ---- parameters / forward ----

Params init_params(const DecoderGraph& graph, Rng& rng);

using TapeF = Tape<float>;

struct LevelPrediction {
  TapeF::Value cls = nullptr;      // (N,K,H,W) logits
  TapeF::Value reg = nullptr;      // (N,4,H,W) distances in pixels, positive
  TapeF::Value ctr = nullptr;      // (N,1,H,W) logit
  int stride = 0;
};

struct ForwardResult {
  std::array<TapeF::Value, kNumLevels> pyramid{};  // p3..p7 features
  std::array<LevelPrediction, kNumLevels> preds{}; // empty if graph has no head
  // leaf node per touched parameter; gradients are read back from here
  std::map<std::string, TapeF::Value> bound_params;
};

// Gradient tensors by parameter name, after tape.backward(). Parameters the
// loss never touched are absent.
std::map<std::string, Tensor> collect_grads(const ForwardResult& result);

// `inputs` must match the graph's input_nodes specs. Training mode drives
// batch-norm statistics; eval mode is deterministic given params.
// The params must not be mutated concurrently with a running forward.
ForwardResult forward(TapeF& tape, const DecoderGraph& graph, Params& params,
                      const std::vector<Tensor>& inputs, bool training);

// Same, over values already on the tape (lets gradients flow into whatever
// produced the inputs, e.g. a backbone being trained jointly).
ForwardResult forward_values(TapeF& tape, const DecoderGraph& graph,
                             Params& params,
                             const std::vector<TapeF::Value>& inputs,
                             bool training);

// (K+4+1, H, W) per-level output map: cls logits, decoded distances, ctr.
TapeF::Value assemble_prediction(TapeF& tape, const LevelPrediction& p);

// Number of FPN-portion forward evaluations since process start; the head
// search path must leave this untouched once features are prefetched.
uint64_t fpn_forward_count();

std::string to_dot(const DecoderGraph& graph);

}  // namespace nfcs
