#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "nfcs/decoder_graph.hpp"

using namespace nfcs;

namespace {

std::array<FeatureSpec, 3> toy_backbone_spec(int img = 128) {
  return {feature_at(img, img, 8, 16), feature_at(img, img, 16, 24),
          feature_at(img, img, 32, 32)};
}

DecoderConfig skip_config() {
  DecoderConfig c;
  for (auto& b : c.fpn.blocks) b = {0, 0, OpKind::Skip, OpKind::Skip, AggKind::Sum};
  for (auto& op : c.head.ops) op = OpKind::Conv3x3;
  c.head.share_from = 0;
  return c;
}

// independent restatement of the dangling rule, straight from the config
std::set<int> dangling_blocks(const DecoderConfig& c) {
  std::set<int> consumed;
  for (int t = 1; t <= kNumBlocks; t++) {
    const auto& b = c.fpn.blocks[static_cast<size_t>(t - 1)];
    if (b.id1 >= 3) consumed.insert(b.id1 - 2);
    if (b.id2 >= 3) consumed.insert(b.id2 - 2);
  }
  std::set<int> out;
  for (int t = 1; t <= 4; t++)
    if (!consumed.count(t)) out.insert(t);
  return out;
}

std::vector<Tensor> random_inputs(const DecoderGraph& g, Rng& rng, int batch = 1) {
  std::vector<Tensor> xs;
  for (int id : g.input_nodes) {
    const FeatureSpec& s = g.at(id).out;
    xs.push_back(Tensor::randn({batch, s.channels, s.height, s.width}, rng, 0.5));
  }
  return xs;
}

}  // namespace

TEST_CASE("degenerate all-c5 chain still lands on canonical strides") {
  DecoderConfig c = skip_config();
  for (auto& b : c.fpn.blocks) b = {2, 2, OpKind::Skip, OpKind::Skip, AggKind::Sum};
  DecoderGraph g = compile(c, toy_backbone_spec(), {8, 16}, 3);
  for (int i = 0; i < 3; i++) {
    const FeatureSpec& s = g.at(g.pyramid_nodes[static_cast<size_t>(i)]).out;
    CHECK(s.stride == kLevelStrides[static_cast<size_t>(i)]);
  }
  CHECK(g.at(g.pyramid_nodes[3]).out.stride == 64);
  CHECK(g.at(g.pyramid_nodes[4]).out.stride == 128);
}

TEST_CASE("merging stride-8 with stride-16 upsamples the coarser branch") {
  DecoderConfig c = skip_config();
  c.fpn.blocks[0] = {0, 1, OpKind::Skip, OpKind::Skip, AggKind::Sum};
  DecoderGraph g = compile(c, toy_backbone_spec(), {8, 16}, 3);
  // find the first block's sum node: both inputs must be stride 8, and the
  // c4 branch must pass through a resize
  bool found = false;
  for (const auto& n : g.nodes) {
    if (n.op != GraphNode::Op::Sum || n.label != "fpn.bb1.sum") continue;
    found = true;
    CHECK(n.out.stride == 8);
    bool has_resize_input = false;
    for (int in : n.inputs) {
      CHECK(g.at(in).out.stride == 8);
      if (g.at(in).op == GraphNode::Op::Resize) has_resize_input = true;
    }
    CHECK(has_resize_input);
  }
  CHECK(found);
}

TEST_CASE("unsampled x1 is merged into all three pyramid outputs") {
  DecoderConfig c = skip_config();
  // block 1 output (pool index 3) is never picked by blocks 2..7
  for (int t = 2; t <= 7; t++)
    c.fpn.blocks[static_cast<size_t>(t - 1)] = {0, 1, OpKind::Skip, OpKind::Skip, AggKind::Sum};
  DecoderGraph g = compile(c, toy_backbone_spec(), {8, 16}, 3);
  REQUIRE(g.global_merges.size() >= 1);
  std::set<int> merged;
  for (const auto& m : g.global_merges) merged.insert(m.block_t);
  CHECK(merged.count(1) == 1);
  for (const auto& m : g.global_merges)
    for (int node : m.add_nodes) CHECK(node >= 0);
}

TEST_CASE("dangling-merge completeness on 300 fuzzed configs") {
  Rng rng(31337);
  for (int i = 0; i < 300; i++) {
    DecoderConfig c = sample_uniform(rng);
    DecoderGraph g = compile(c, toy_backbone_spec(), {8, 16}, 3);
    std::set<int> expect = dangling_blocks(c);
    std::set<int> got;
    for (const auto& m : g.global_merges) got.insert(m.block_t);
    REQUIRE(got == expect);
  }
}

TEST_CASE("resolution closure: internal strides stay in {8,16,32}") {
  Rng rng(424242);
  for (int i = 0; i < 100; i++) {
    DecoderConfig c = sample_uniform(rng);
    DecoderGraph g = compile_fpn_only(c.fpn, toy_backbone_spec(), 8);
    int p6 = g.pyramid_nodes[3];
    for (int id = 0; id < p6; id++) {
      int s = g.at(id).out.stride;
      REQUIRE((s == 8 || s == 16 || s == 32));
    }
    // merges output the finer of the two input strides
    for (const auto& n : g.nodes) {
      if (n.op != GraphNode::Op::Sum && n.op != GraphNode::Op::Concat) continue;
      int s0 = g.at(n.inputs[0]).out.stride;
      int s1 = g.at(n.inputs[1]).out.stride;
      REQUIRE(n.out.stride == std::min(s0, s1));
    }
  }
}

TEST_CASE("share_from=2 gives five replicas for layers 0,1 and one for 2..5") {
  DecoderConfig c = skip_config();
  for (auto& op : c.head.ops) op = OpKind::Conv1x1;
  c.head.share_from = 2;
  DecoderGraph g = compile(c, toy_backbone_spec(), {8, 16}, 3);
  Rng rng(5);
  Params p = init_params(g, rng);
  for (int j = 0; j < 2; j++) {
    int replicas = 0;
    for (int l = 3; l <= 7; l++)
      if (p.has("head.lvl" + std::to_string(l) + ".op" + std::to_string(j) + ".w"))
        replicas++;
    CHECK(replicas == 5);
    CHECK(!p.has("head.op" + std::to_string(j) + ".w"));
  }
  for (int j = 2; j < 6; j++) {
    CHECK(p.has("head.op" + std::to_string(j) + ".w"));
    for (int l = 3; l <= 7; l++)
      CHECK(!p.has("head.lvl" + std::to_string(l) + ".op" + std::to_string(j) + ".w"));
  }
  REQUIRE(g.head_partition.size() == 6);
  CHECK(g.head_partition[0]);
  CHECK(g.head_partition[1]);
  for (int j = 2; j < 6; j++) CHECK(!g.head_partition[static_cast<size_t>(j)]);
}

TEST_CASE("forward shapes: 128px input, K=3 gives 8x16x16 at p3 and 8x1x1 at p7") {
  Rng rng(7);
  DecoderConfig c = sample_uniform(rng);
  DecoderGraph g = compile(c, toy_backbone_spec(128), {8, 16}, 3);
  Params p = init_params(g, rng);
  TapeF tape(false);
  auto in = random_inputs(g, rng);
  ForwardResult r = forward(tape, g, p, in, false);
  auto y3 = assemble_prediction(tape, r.preds[0]);
  auto y7 = assemble_prediction(tape, r.preds[4]);
  CHECK(y3->value.shape() == Shape{1, 8, 16, 16});
  CHECK(y7->value.shape() == Shape{1, 8, 1, 1});
}

TEST_CASE("zero projection weights make classification logits constant") {
  Rng rng(11);
  DecoderConfig c = sample_uniform(rng);
  DecoderGraph g = compile(c, toy_backbone_spec(), {8, 16}, 3);
  Params p = init_params(g, rng);
  std::fill(p.get("head.cls.w").vec().begin(), p.get("head.cls.w").vec().end(), 0.0f);
  std::fill(p.get("head.cls.b").vec().begin(), p.get("head.cls.b").vec().end(), 0.5f);
  TapeF tape(false);
  ForwardResult r = forward(tape, g, p, random_inputs(g, rng), false);
  for (const auto& pred : r.preds)
    for (size_t i = 0; i < pred.cls->value.numel(); i++)
      CHECK(pred.cls->value[i] == doctest::Approx(0.5f));
}

TEST_CASE("fully shared head maps equal inputs to equal outputs across levels") {
  HeadConfig head;
  head.ops = {OpKind::Conv3x3, OpKind::SepConv3x3, OpKind::Skip,
              OpKind::Conv1x1, OpKind::DeformConv3x3, OpKind::Conv3x3};
  head.share_from = 0;
  std::array<FeatureSpec, kNumLevels> spec{};
  for (int l = 0; l < kNumLevels; l++)
    spec[static_cast<size_t>(l)] = {kLevelStrides[static_cast<size_t>(l)], 8, 6, 6};
  DecoderGraph g = compile_head_only(head, spec, 16, 3);
  Rng rng(13);
  Params p = init_params(g, rng);
  Tensor shared_input = Tensor::randn({1, 8, 6, 6}, rng);
  std::vector<Tensor> in(5, shared_input);
  TapeF tape(false);
  ForwardResult r = forward(tape, g, p, in, false);
  for (int l = 1; l < kNumLevels; l++) {
    for (size_t i = 0; i < r.preds[0].cls->value.numel(); i++)
      CHECK(r.preds[static_cast<size_t>(l)].cls->value[i] ==
            doctest::Approx(r.preds[0].cls->value[i]));
    // reg is scaled by the level stride; compare the underlying distances
    float ratio = static_cast<float>(r.preds[static_cast<size_t>(l)].stride) /
                  static_cast<float>(r.preds[0].stride);
    for (size_t i = 0; i < r.preds[0].reg->value.numel(); i++)
      CHECK(r.preds[static_cast<size_t>(l)].reg->value[i] ==
            doctest::Approx(r.preds[0].reg->value[i] * ratio).epsilon(1e-4));
  }
}

TEST_CASE("one training step keeps shared layers single and splits independent ones") {
  DecoderConfig c = skip_config();
  for (auto& op : c.head.ops) op = OpKind::Conv1x1;
  c.head.share_from = 1;
  DecoderGraph g = compile(c, toy_backbone_spec(), {8, 16}, 3);
  Rng rng(17);
  Params p = init_params(g, rng);
  TapeF tape;
  ForwardResult r = forward(tape, g, p, random_inputs(g, rng), true);
  TapeF::Value loss = nullptr;
  for (const auto& pred : r.preds) {
    TapeF::Value term = tape.add(tape.sum(tape.mul(pred.cls, pred.cls)),
                                 tape.sum(tape.mul(pred.ctr, pred.ctr)));
    loss = loss ? tape.add(loss, term) : term;
  }
  tape.backward(loss);
  auto grads = collect_grads(r);
  adam_step<float>(p, grads, 1e-2f);

  // independent replicas received distinct gradients and now differ
  const Tensor& w3 = p.get("head.lvl3.op0.w");
  const Tensor& w4 = p.get("head.lvl4.op0.w");
  bool differ = false;
  for (size_t i = 0; i < w3.numel(); i++)
    if (w3[i] != w4[i]) differ = true;
  CHECK(differ);
  // the shared layer is one tensor, so cross-level equality is structural
  CHECK(p.has("head.op1.w"));
  CHECK(!p.has("head.lvl3.op1.w"));
}

TEST_CASE("compilation is deterministic") {
  Rng rng(19);
  DecoderConfig c = sample_uniform(rng);
  DecoderGraph a = compile(c, toy_backbone_spec(), {8, 16}, 3);
  DecoderGraph b = compile(c, toy_backbone_spec(), {8, 16}, 3);
  REQUIRE(a.nodes.size() == b.nodes.size());
  for (size_t i = 0; i < a.nodes.size(); i++) {
    CHECK(a.nodes[i].op == b.nodes[i].op);
    CHECK(a.nodes[i].inputs == b.nodes[i].inputs);
    CHECK(a.nodes[i].label == b.nodes[i].label);
    CHECK(a.nodes[i].param_prefix == b.nodes[i].param_prefix);
  }
}

TEST_CASE("original decoder: 4 convs per branch, fully shared, (K+4+1) outputs") {
  DecoderGraph g = original_fcos_decoder(toy_backbone_spec(), {8, 8}, 3);
  Rng rng(23);
  Params p = init_params(g, rng);
  for (int j = 0; j < 4; j++) {
    CHECK(p.has("head.cls_tower" + std::to_string(j) + ".w"));
    CHECK(p.has("head.reg_tower" + std::to_string(j) + ".w"));
  }
  CHECK(!p.has("head.cls_tower4.w"));
  // shared across levels: no per-level prefixes exist
  for (const auto& [name, e] : p.entries()) CHECK(name.find("lvl") == std::string::npos);
  TapeF tape(false);
  ForwardResult r = forward(tape, g, p, random_inputs(g, rng), false);
  auto y = assemble_prediction(tape, r.preds[0]);
  CHECK(y->value.dim(1) == 3 + 4 + 1);
}

TEST_CASE("deform variant swaps the fpn output convs") {
  DecoderGraph g = deform_fpn_decoder(toy_backbone_spec(), {8, 8}, 3);
  int deform_nodes = 0;
  for (const auto& n : g.nodes)
    if (n.op == GraphNode::Op::DeformConv) deform_nodes++;
  CHECK(deform_nodes == 3);
}

TEST_CASE("invalid configs propagate search-space validation") {
  DecoderConfig c = skip_config();
  c.fpn.blocks[0].id1 = 5;
  CHECK_THROWS_AS(compile(c, toy_backbone_spec(), {8, 16}, 3), Error);
  DecoderConfig c2 = skip_config();
  CHECK_THROWS_AS(compile(c2, toy_backbone_spec(), {0, 16}, 3), Error);
}

TEST_CASE("dot export names every node") {
  Rng rng(29);
  DecoderConfig c = sample_uniform(rng);
  DecoderGraph g = compile(c, toy_backbone_spec(), {8, 16}, 3);
  std::string dot = to_dot(g);
  CHECK(dot.find("digraph") != std::string::npos);
  CHECK(dot.find("fpn.bb1") != std::string::npos);
  CHECK(dot.find("head.cls") != std::string::npos);
}
