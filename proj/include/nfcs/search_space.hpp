#pragma once

#include <array>
#include <string>
#include <vector>

#include "nfcs/common.hpp"
#include "nfcs/rng.hpp"

namespace nfcs {

// Unary operation vocabulary. IDs 0-4 are legal anywhere; Conv1x1/Conv3x3
// exist only in head positions.
enum class OpKind : int {
  SepConv3x3 = 0,
  SepConv3x3Dil3 = 1,
  SepConv5x5Dil6 = 2,
  Skip = 3,
  DeformConv3x3 = 4,
  Conv1x1 = 5,
  Conv3x3 = 6,
};

enum class AggKind : int { Sum = 0, ConcatProj = 1 };

constexpr int kNumFpnOps = 5;
constexpr int kNumHeadOps = 7;
constexpr int kNumBlocks = 7;
constexpr int kHeadLen = 6;
constexpr int kFpnTokenLen = kNumBlocks * 5;            // 35
constexpr int kTokenLen = kFpnTokenLen + kHeadLen + 1;  // 42

const char* op_name(OpKind op);
const char* agg_name(AggKind agg);

// One FPN block: two picks from the sampling pool, a unary op on each, and an
// aggregation. Picking the same pool entry twice is allowed.
struct BasicBlockConfig {
  int id1 = 0;
  int id2 = 0;
  OpKind op1 = OpKind::Skip;
  OpKind op2 = OpKind::Skip;
  AggKind agg = AggKind::Sum;

  bool operator==(const BasicBlockConfig&) const = default;
};

struct FpnConfig {
  std::array<BasicBlockConfig, kNumBlocks> blocks;

  bool operator==(const FpnConfig&) const = default;
};

// share_from = j: layers 0..j-1 carry per-level weights, layers j..5 are
// shared across pyramid levels. 0 means fully shared.
struct HeadConfig {
  std::array<OpKind, kHeadLen> ops;
  int share_from = 0;

  bool operator==(const HeadConfig&) const = default;
};

struct DecoderConfig {
  FpnConfig fpn;
  HeadConfig head;

  bool operator==(const DecoderConfig&) const = default;
};

enum class SearchStage { FpnOnly, HeadOnly, Joint };

const char* stage_name(SearchStage s);
SearchStage stage_from_name(const std::string& name);

// Per-position vocabulary sizes for a stage's token positions.
struct ActionSpace {
  SearchStage stage;
  std::vector<int> vocab_sizes;
  int length() const { return static_cast<int>(vocab_sizes.size()); }
};

// Pool for FPN block t (1-based) holds the 3 backbone features plus the t-1
// earlier block outputs, so its id vocabulary is t+2.
inline int pool_size(int block_t) { return block_t + 2; }

void validate(const DecoderConfig& config);

std::vector<int> encode(const DecoderConfig& config);
DecoderConfig decode(const std::vector<int>& tokens);

// Stage-restricted views of a full token sequence.
std::vector<int> fpn_tokens(const DecoderConfig& config);
std::vector<int> head_tokens(const DecoderConfig& config);
FpnConfig decode_fpn(const std::vector<int>& tokens35);
HeadConfig decode_head(const std::vector<int>& tokens7);

ActionSpace action_space(SearchStage stage);

// Exact configuration count; the FPN space alone exceeds 2^64.
unsigned __int128 space_size(SearchStage stage);
unsigned __int128 space_size_of(const std::vector<int>& vocab_sizes);
std::string u128_str(unsigned __int128 v);

DecoderConfig sample_uniform(Rng& rng);
std::vector<int> sample_uniform_tokens(const ActionSpace& space, Rng& rng);

// One-line rendering for reports, e.g. "bb1(c3,c4|dconv3,sep3|cat)".
std::string pretty(const DecoderConfig& config);
std::string pretty(const FpnConfig& fpn);
std::string pretty(const HeadConfig& head);

}  // namespace nfcs
