#include "nfcs/search_space.hpp"

namespace nfcs {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::SepConv3x3: return "sep3";
    case OpKind::SepConv3x3Dil3: return "sep3d3";
    case OpKind::SepConv5x5Dil6: return "sep5d6";
    case OpKind::Skip: return "skip";
    case OpKind::DeformConv3x3: return "dconv3";
    case OpKind::Conv1x1: return "conv1";
    case OpKind::Conv3x3: return "conv3";
  }
  return "?";
}

const char* agg_name(AggKind agg) {
  return agg == AggKind::Sum ? "sum" : "cat";
}

const char* stage_name(SearchStage s) {
  switch (s) {
    case SearchStage::FpnOnly: return "fpn";
    case SearchStage::HeadOnly: return "head";
    case SearchStage::Joint: return "joint";
  }
  return "?";
}

SearchStage stage_from_name(const std::string& name) {
  if (name == "fpn") return SearchStage::FpnOnly;
  if (name == "head") return SearchStage::HeadOnly;
  if (name == "joint") return SearchStage::Joint;
  fail("unknown stage '", name, "' (expected fpn|head|joint)");
}

void validate(const DecoderConfig& config) {
  for (int t = 1; t <= kNumBlocks; t++) {
    const BasicBlockConfig& b = config.fpn.blocks[static_cast<size_t>(t - 1)];
    int pool = pool_size(t);
    NFCS_REQUIRE(b.id1 >= 0 && b.id1 < pool, "block ", t, " id1=", b.id1,
                 " outside pool of size ", pool);
    NFCS_REQUIRE(b.id2 >= 0 && b.id2 < pool, "block ", t, " id2=", b.id2,
                 " outside pool of size ", pool);
    for (OpKind op : {b.op1, b.op2}) {
      int v = static_cast<int>(op);
      NFCS_REQUIRE(v >= 0 && v < kNumFpnOps, "block ", t,
                   " uses op id ", v, " not valid in FPN positions");
    }
    int aggv = static_cast<int>(b.agg);
    NFCS_REQUIRE(aggv == 0 || aggv == 1, "block ", t, " bad aggregation id ", aggv);
  }
  for (int j = 0; j < kHeadLen; j++) {
    int v = static_cast<int>(config.head.ops[static_cast<size_t>(j)]);
    NFCS_REQUIRE(v >= 0 && v < kNumHeadOps, "head layer ", j, " bad op id ", v);
  }
  NFCS_REQUIRE(config.head.share_from >= 0 && config.head.share_from <= kHeadLen,
               "share_from=", config.head.share_from, " outside [0,", kHeadLen, "]");
}

std::vector<int> fpn_tokens(const DecoderConfig& config) {
  std::vector<int> t;
  t.reserve(kFpnTokenLen);
  for (const BasicBlockConfig& b : config.fpn.blocks) {
    t.push_back(b.id1);
    t.push_back(b.id2);
    t.push_back(static_cast<int>(b.op1));
    t.push_back(static_cast<int>(b.op2));
    t.push_back(static_cast<int>(b.agg));
  }
  return t;
}

std::vector<int> head_tokens(const DecoderConfig& config) {
  std::vector<int> t;
  t.reserve(kHeadLen + 1);
  for (OpKind op : config.head.ops) t.push_back(static_cast<int>(op));
  t.push_back(config.head.share_from);
  return t;
}

std::vector<int> encode(const DecoderConfig& config) {
  validate(config);
  std::vector<int> t = fpn_tokens(config);
  std::vector<int> h = head_tokens(config);
  t.insert(t.end(), h.begin(), h.end());
  return t;
}

static void check_tokens(const std::vector<int>& tokens,
                         const ActionSpace& space) {
  NFCS_REQUIRE(tokens.size() == space.vocab_sizes.size(), "expected ",
               space.vocab_sizes.size(), " tokens for stage ",
               stage_name(space.stage), ", got ", tokens.size());
  for (size_t i = 0; i < tokens.size(); i++) {
    NFCS_REQUIRE(tokens[i] >= 0 && tokens[i] < space.vocab_sizes[i],
                 "token ", tokens[i], " at position ", i,
                 " outside vocabulary of size ", space.vocab_sizes[i]);
  }
}

FpnConfig decode_fpn(const std::vector<int>& tokens35) {
  check_tokens(tokens35, action_space(SearchStage::FpnOnly));
  FpnConfig fpn;
  for (int t = 0; t < kNumBlocks; t++) {
    const int* p = tokens35.data() + t * 5;
    fpn.blocks[static_cast<size_t>(t)] = {p[0], p[1], static_cast<OpKind>(p[2]),
                                          static_cast<OpKind>(p[3]),
                                          static_cast<AggKind>(p[4])};
  }
  return fpn;
}

HeadConfig decode_head(const std::vector<int>& tokens7) {
  check_tokens(tokens7, action_space(SearchStage::HeadOnly));
  HeadConfig head;
  for (int j = 0; j < kHeadLen; j++)
    head.ops[static_cast<size_t>(j)] = static_cast<OpKind>(tokens7[static_cast<size_t>(j)]);
  head.share_from = tokens7[kHeadLen];
  return head;
}

DecoderConfig decode(const std::vector<int>& tokens) {
  check_tokens(tokens, action_space(SearchStage::Joint));
  DecoderConfig c;
  c.fpn = decode_fpn({tokens.begin(), tokens.begin() + kFpnTokenLen});
  c.head = decode_head({tokens.begin() + kFpnTokenLen, tokens.end()});
  return c;
}

ActionSpace action_space(SearchStage stage) {
  ActionSpace s;
  s.stage = stage;
  if (stage == SearchStage::FpnOnly || stage == SearchStage::Joint) {
    for (int t = 1; t <= kNumBlocks; t++) {
      int pool = pool_size(t);
      s.vocab_sizes.insert(s.vocab_sizes.end(),
                           {pool, pool, kNumFpnOps, kNumFpnOps, 2});
    }
  }
  if (stage == SearchStage::HeadOnly || stage == SearchStage::Joint) {
    for (int j = 0; j < kHeadLen; j++) s.vocab_sizes.push_back(kNumHeadOps);
    s.vocab_sizes.push_back(kHeadLen + 1);
  }
  return s;
}

unsigned __int128 space_size_of(const std::vector<int>& vocab_sizes) {
  unsigned __int128 n = 1;
  for (int v : vocab_sizes) n *= static_cast<unsigned>(v);
  return n;
}

unsigned __int128 space_size(SearchStage stage) {
  return space_size_of(action_space(stage).vocab_sizes);
}

std::string u128_str(unsigned __int128 v) {
  if (v == 0) return "0";
  std::string s;
  while (v > 0) {
    s.insert(s.begin(), static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  return s;
}

std::vector<int> sample_uniform_tokens(const ActionSpace& space, Rng& rng) {
  std::vector<int> t(space.vocab_sizes.size());
  for (size_t i = 0; i < t.size(); i++)
    t[i] = static_cast<int>(rng.bounded(static_cast<uint32_t>(space.vocab_sizes[i])));
  return t;
}

DecoderConfig sample_uniform(Rng& rng) {
  return decode(sample_uniform_tokens(action_space(SearchStage::Joint), rng));
}

static std::string pool_entry_name(int idx) {
  if (idx < 3) return "c" + std::to_string(idx + 3);
  return "x" + std::to_string(idx - 2);
}

std::string pretty(const FpnConfig& fpn) {
  std::string s;
  for (int t = 1; t <= kNumBlocks; t++) {
    const BasicBlockConfig& b = fpn.blocks[static_cast<size_t>(t - 1)];
    if (t > 1) s += " ";
    s += "bb" + std::to_string(t) + "(" + pool_entry_name(b.id1) + "," +
         pool_entry_name(b.id2) + "|" + op_name(b.op1) + "," + op_name(b.op2) +
         "|" + agg_name(b.agg) + ")";
  }
  return s;
}

std::string pretty(const HeadConfig& head) {
  std::string s = "head(";
  for (int j = 0; j < kHeadLen; j++) {
    if (j) s += ",";
    s += op_name(head.ops[static_cast<size_t>(j)]);
  }
  s += "|share=" + std::to_string(head.share_from) + ")";
  return s;
}

std::string pretty(const DecoderConfig& config) {
  return pretty(config.fpn) + " " + pretty(config.head);
}

}  // namespace nfcs
