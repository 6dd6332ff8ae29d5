#include "nfcs/decoder_graph.hpp"

#include <atomic>
#include <sstream>

namespace nfcs {

namespace {

std::atomic<uint64_t> g_fpn_forward_count{0};

struct Builder {
  DecoderGraph& g;
  const CompileOptions& opts;

  int input(FeatureSpec spec, const std::string& label) {
    GraphNode n;
    n.op = GraphNode::Op::Input;
    n.out = spec;
    n.label = label;
    return g.add(std::move(n));
  }

  int resize_to(int src, const FeatureSpec& target, const std::string& label) {
    const FeatureSpec& s = g.at(src).out;
    if (s.height == target.height && s.width == target.width &&
        s.stride == target.stride)
      return src;
    GraphNode n;
    n.op = GraphNode::Op::Resize;
    n.inputs = {src};
    n.out = {target.stride, s.channels, target.height, target.width};
    n.label = label;
    return g.add(std::move(n));
  }

  int conv(int src, int out_channels, int kernel, int stride, int dilation,
           NormKind norm, bool relu, const std::string& prefix,
           const std::string& label) {
    const FeatureSpec& s = g.at(src).out;
    GraphNode n;
    n.op = GraphNode::Op::Conv;
    n.inputs = {src};
    n.kernel = kernel;
    n.stride = stride;
    n.dilation = dilation;
    n.norm = norm;
    n.norm_groups = opts.gn_groups;
    n.relu = relu;
    n.param_prefix = prefix;
    n.label = label;
    n.out = {s.stride * stride, out_channels,
             conv_detail::same_out(s.height, stride),
             conv_detail::same_out(s.width, stride)};
    return g.add(std::move(n));
  }

  int unary_op(int src, OpKind op, int width, NormKind norm,
               const std::string& prefix, const std::string& label) {
    const FeatureSpec& s = g.at(src).out;
    GraphNode n;
    n.inputs = {src};
    n.norm = norm;
    n.norm_groups = opts.gn_groups;
    n.relu = true;
    n.param_prefix = prefix;
    n.label = label;
    n.out = {s.stride, width, s.height, s.width};
    switch (op) {
      case OpKind::SepConv3x3:
        n.op = GraphNode::Op::SepConv;
        n.kernel = 3;
        n.dilation = 1;
        break;
      case OpKind::SepConv3x3Dil3:
        n.op = GraphNode::Op::SepConv;
        n.kernel = 3;
        n.dilation = 3;
        break;
      case OpKind::SepConv5x5Dil6:
        n.op = GraphNode::Op::SepConv;
        n.kernel = 5;
        n.dilation = 6;
        break;
      case OpKind::DeformConv3x3:
        n.op = GraphNode::Op::DeformConv;
        n.kernel = 3;
        n.dilation = 1;
        break;
      case OpKind::Conv1x1:
        n.op = GraphNode::Op::Conv;
        n.kernel = 1;
        break;
      case OpKind::Conv3x3:
        n.op = GraphNode::Op::Conv;
        n.kernel = 3;
        break;
      case OpKind::Skip:
        n.op = GraphNode::Op::Skip;
        n.out.channels = s.channels;  // identity keeps whatever flows in
        n.norm = NormKind::None;
        n.relu = false;
        n.param_prefix.clear();
        break;
    }
    return g.add(std::move(n));
  }

  // Aligns both inputs to the finer stride, then sums or concat-projects.
  int aggregate(int a, int b, AggKind agg, int width, NormKind norm,
                const std::string& prefix, const std::string& label) {
    const FeatureSpec* sa = &g.at(a).out;
    const FeatureSpec* sb = &g.at(b).out;
    if (sa->stride > sb->stride) {
      a = resize_to(a, *sb, label + ".up_a");
      sa = &g.at(a).out;
    } else if (sb->stride > sa->stride) {
      b = resize_to(b, *sa, label + ".up_b");
      sb = &g.at(b).out;
    }
    if (agg == AggKind::Sum) {
      NFCS_REQUIRE(sa->channels == sb->channels, "sum aggregation channel mismatch");
      GraphNode n;
      n.op = GraphNode::Op::Sum;
      n.inputs = {a, b};
      n.out = *sa;
      n.label = label + ".sum";
      return g.add(std::move(n));
    }
    GraphNode n;
    n.op = GraphNode::Op::Concat;
    n.inputs = {a, b};
    n.out = {sa->stride, width, sa->height, sa->width};
    n.kernel = 1;
    n.norm = norm;
    n.norm_groups = opts.gn_groups;
    n.relu = true;
    n.param_prefix = prefix;
    n.label = label + ".cat";
    return g.add(std::move(n));
  }

  // Element-wise add with resizing in both directions (Eq-style merge of a
  // dangling feature onto a pyramid output).
  int merge_add(int target, int extra, const std::string& label) {
    int aligned = resize_to(extra, g.at(target).out, label + ".rs");
    GraphNode n;
    n.op = GraphNode::Op::Sum;
    n.inputs = {target, aligned};
    n.out = g.at(target).out;
    n.label = label;
    return g.add(std::move(n));
  }
};

std::array<int, 2> image_dims_from_c3(const FeatureSpec& c3) {
  return {c3.height * c3.stride, c3.width * c3.stride};
}

void check_backbone_spec(const std::array<FeatureSpec, 3>& spec) {
  for (int i = 0; i < 3; i++) {
    NFCS_REQUIRE(spec[static_cast<size_t>(i)].stride == kLevelStrides[static_cast<size_t>(i)],
                 "backbone feature ", i, " must have stride ",
                 kLevelStrides[static_cast<size_t>(i)]);
    NFCS_REQUIRE(spec[static_cast<size_t>(i)].channels > 0 &&
                     spec[static_cast<size_t>(i)].height > 0 &&
                     spec[static_cast<size_t>(i)].width > 0,
                 "zero-sized backbone feature ", i);
  }
}

// Searched FPN: laterals, 7 basic blocks over the growing pool, canonical
// output resizing, dangling merges, then p6/p7 stride-2 convs.
// Returns the final pyramid node ids.
std::array<int, kNumLevels> build_fpn(Builder& b, const FpnConfig& fpn,
                                      const std::array<FeatureSpec, 3>& backbone_spec,
                                      int width) {
  check_backbone_spec(backbone_spec);
  DecoderGraph& g = b.g;
  auto [img_h, img_w] = image_dims_from_c3(backbone_spec[0]);

  std::vector<int> pool;
  for (int i = 0; i < 3; i++) {
    int in = b.input(backbone_spec[static_cast<size_t>(i)], "c" + std::to_string(i + 3));
    g.input_nodes.push_back(in);
    pool.push_back(b.conv(in, width, 1, 1, 1, b.opts.fpn_norm, true,
                          "fpn.lat" + std::to_string(i + 3),
                          "fpn.lat" + std::to_string(i + 3)));
  }

  std::array<int, kNumBlocks + 1> block_out{};  // 1-based
  std::array<bool, kNumBlocks + 1> consumed{};
  for (int t = 1; t <= kNumBlocks; t++) {
    const BasicBlockConfig& blk = fpn.blocks[static_cast<size_t>(t - 1)];
    NFCS_REQUIRE(blk.id1 < static_cast<int>(pool.size()) &&
                     blk.id2 < static_cast<int>(pool.size()),
                 "block ", t, " samples outside its pool");
    for (int id : {blk.id1, blk.id2}) {
      if (id >= 3) consumed[static_cast<size_t>(id - 2)] = true;
    }
    std::string base = "fpn.bb" + std::to_string(t);
    int y1 = b.unary_op(pool[static_cast<size_t>(blk.id1)], blk.op1, width,
                        b.opts.fpn_norm, base + ".a", base + ".a");
    int y2 = b.unary_op(pool[static_cast<size_t>(blk.id2)], blk.op2, width,
                        b.opts.fpn_norm, base + ".b", base + ".b");
    int agg = b.aggregate(y1, y2, blk.agg, width, b.opts.fpn_norm, base + ".agg", base);
    block_out[static_cast<size_t>(t)] = agg;
    pool.push_back(agg);
  }

  // collect x5,x6,x7 as p3,p4,p5 at canonical strides
  std::array<int, kNumLevels> pyramid{};
  for (int i = 0; i < 3; i++) {
    int stride = kLevelStrides[static_cast<size_t>(i)];
    FeatureSpec target = feature_at(img_h, img_w, stride, width);
    pyramid[static_cast<size_t>(i)] =
        b.resize_to(block_out[static_cast<size_t>(5 + i)], target,
                    "fpn.p" + std::to_string(i + 3) + ".rs");
  }

  // dangling block outputs (t < 5, never sampled later) merge into all of
  // p3..p5 after the canonical resize
  for (int t = 1; t <= 4; t++) {
    if (consumed[static_cast<size_t>(t)]) continue;
    GlobalMerge m;
    m.block_t = t;
    m.source_node = block_out[static_cast<size_t>(t)];
    for (int i = 0; i < 3; i++) {
      pyramid[static_cast<size_t>(i)] =
          b.merge_add(pyramid[static_cast<size_t>(i)], m.source_node,
                      "fpn.merge.x" + std::to_string(t) + ".p" + std::to_string(i + 3));
      m.add_nodes[static_cast<size_t>(i)] = pyramid[static_cast<size_t>(i)];
    }
    g.global_merges.push_back(m);
  }

  pyramid[3] = b.conv(pyramid[2], width, 3, 2, 1, b.opts.fpn_norm, true,
                      "fpn.p6", "fpn.p6");
  pyramid[4] = b.conv(pyramid[3], width, 3, 2, 1, b.opts.fpn_norm, true,
                      "fpn.p7", "fpn.p7");
  return pyramid;
}

// Baseline top-down FPN with lateral 1x1s and 3x3 output convs.
std::array<int, kNumLevels> build_original_fpn(Builder& b,
                                               const std::array<FeatureSpec, 3>& backbone_spec,
                                               int width, bool deformable) {
  check_backbone_spec(backbone_spec);
  DecoderGraph& g = b.g;
  std::array<int, 3> lat{};
  for (int i = 0; i < 3; i++) {
    int in = b.input(backbone_spec[static_cast<size_t>(i)], "c" + std::to_string(i + 3));
    g.input_nodes.push_back(in);
    lat[static_cast<size_t>(i)] =
        b.conv(in, width, 1, 1, 1, b.opts.fpn_norm, true,
               "fpn.lat" + std::to_string(i + 3), "fpn.lat" + std::to_string(i + 3));
  }
  std::array<int, 3> td{};
  td[2] = lat[2];
  for (int i = 1; i >= 0; i--) {
    int up = b.resize_to(td[static_cast<size_t>(i + 1)], g.at(lat[static_cast<size_t>(i)]).out,
                         "fpn.up" + std::to_string(i + 3));
    GraphNode n;
    n.op = GraphNode::Op::Sum;
    n.inputs = {lat[static_cast<size_t>(i)], up};
    n.out = g.at(lat[static_cast<size_t>(i)]).out;
    n.label = "fpn.td" + std::to_string(i + 3);
    td[static_cast<size_t>(i)] = g.add(std::move(n));
  }
  std::array<int, kNumLevels> pyramid{};
  for (int i = 0; i < 3; i++) {
    std::string name = "fpn.out" + std::to_string(i + 3);
    if (deformable) {
      pyramid[static_cast<size_t>(i)] =
          b.unary_op(td[static_cast<size_t>(i)], OpKind::DeformConv3x3, width,
                     b.opts.fpn_norm, name, name);
    } else {
      pyramid[static_cast<size_t>(i)] =
          b.conv(td[static_cast<size_t>(i)], width, 3, 1, 1, b.opts.fpn_norm,
                 true, name, name);
    }
  }
  pyramid[3] = b.conv(pyramid[2], width, 3, 2, 1, b.opts.fpn_norm, true, "fpn.p6", "fpn.p6");
  pyramid[4] = b.conv(pyramid[3], width, 3, 2, 1, b.opts.fpn_norm, true, "fpn.p7", "fpn.p7");
  return pyramid;
}

int head_in_proj(Builder& b, int src, int level, Widths widths) {
  if (b.g.at(src).out.channels == widths.head) return src;
  // width adapter; a single shared projection serves every level
  return b.conv(src, widths.head, 1, 1, 1, NormKind::Group, true, "head.inproj",
                "head.inproj.l" + std::to_string(level + 3));
}

// Searched head: six sequential ops then three 1x1 projections. Layers below
// share_from get per-level parameter prefixes.
void build_head(Builder& b, const HeadConfig& head,
                const std::array<int, kNumLevels>& pyramid, Widths widths,
                int num_classes) {
  DecoderGraph& g = b.g;
  g.head_partition.assign(kHeadLen, false);
  for (int j = 0; j < head.share_from; j++) g.head_partition[static_cast<size_t>(j)] = true;
  for (int l = 0; l < kNumLevels; l++) {
    std::string lvl = "l" + std::to_string(l + 3);
    int x = head_in_proj(b, pyramid[static_cast<size_t>(l)], l, widths);
    for (int j = 0; j < kHeadLen; j++) {
      bool independent = j < head.share_from;
      std::string prefix = independent
                               ? "head.lvl" + std::to_string(l + 3) + ".op" + std::to_string(j)
                               : "head.op" + std::to_string(j);
      x = b.unary_op(x, head.ops[static_cast<size_t>(j)], widths.head,
                     NormKind::Group, prefix, prefix + "." + lvl);
    }
    DecoderGraph::LevelHead out;
    out.cls = b.conv(x, num_classes, 1, 1, 1, NormKind::None, false, "head.cls",
                     "head.cls." + lvl);
    out.reg = b.conv(x, 4, 1, 1, 1, NormKind::None, false, "head.reg",
                     "head.reg." + lvl);
    out.ctr = b.conv(x, 1, 1, 1, 1, NormKind::None, false, "head.ctr",
                     "head.ctr." + lvl);
    g.head_outputs[static_cast<size_t>(l)] = out;
  }
  g.num_classes = num_classes;
  g.widths = widths;
}

// FCOS baseline head: two fully shared 4-conv towers; centerness hangs off
// the classification branch. Projections are 3x3 as in FCOS.
void build_original_head(Builder& b, const std::array<int, kNumLevels>& pyramid,
                         Widths widths, int num_classes) {
  DecoderGraph& g = b.g;
  for (int l = 0; l < kNumLevels; l++) {
    std::string lvl = "l" + std::to_string(l + 3);
    int in = head_in_proj(b, pyramid[static_cast<size_t>(l)], l, widths);
    int cls_x = in, reg_x = in;
    for (int j = 0; j < 4; j++) {
      cls_x = b.conv(cls_x, widths.head, 3, 1, 1, NormKind::Group, true,
                     "head.cls_tower" + std::to_string(j),
                     "head.cls_tower" + std::to_string(j) + "." + lvl);
      reg_x = b.conv(reg_x, widths.head, 3, 1, 1, NormKind::Group, true,
                     "head.reg_tower" + std::to_string(j),
                     "head.reg_tower" + std::to_string(j) + "." + lvl);
    }
    DecoderGraph::LevelHead out;
    out.cls = b.conv(cls_x, num_classes, 3, 1, 1, NormKind::None, false,
                     "head.cls", "head.cls." + lvl);
    out.ctr = b.conv(cls_x, 1, 3, 1, 1, NormKind::None, false, "head.ctr",
                     "head.ctr." + lvl);
    out.reg = b.conv(reg_x, 4, 3, 1, 1, NormKind::None, false, "head.reg",
                     "head.reg." + lvl);
    g.head_outputs[static_cast<size_t>(l)] = out;
  }
  g.num_classes = num_classes;
  g.widths = widths;
}

std::array<int, kNumLevels> pyramid_inputs(Builder& b,
                                           const std::array<FeatureSpec, kNumLevels>& spec) {
  std::array<int, kNumLevels> nodes{};
  for (int i = 0; i < kNumLevels; i++) {
    nodes[static_cast<size_t>(i)] =
        b.input(spec[static_cast<size_t>(i)], "p" + std::to_string(i + 3));
    b.g.input_nodes.push_back(nodes[static_cast<size_t>(i)]);
  }
  return nodes;
}

}  // namespace

std::array<FeatureSpec, kNumLevels> pyramid_spec_from(
    const std::array<FeatureSpec, 3>& backbone_spec, int width) {
  auto [img_h, img_w] = image_dims_from_c3(backbone_spec[0]);
  std::array<FeatureSpec, kNumLevels> out{};
  for (int i = 0; i < kNumLevels; i++)
    out[static_cast<size_t>(i)] =
        feature_at(img_h, img_w, kLevelStrides[static_cast<size_t>(i)], width);
  return out;
}

DecoderGraph compile(const DecoderConfig& config,
                     const std::array<FeatureSpec, 3>& backbone_spec,
                     Widths widths, int num_classes, const CompileOptions& opts) {
  validate(config);
  NFCS_REQUIRE(widths.fpn > 0 && widths.head > 0, "widths must be positive");
  NFCS_REQUIRE(num_classes >= 1, "need at least one class");
  DecoderGraph g;
  Builder b{g, opts};
  auto pyramid = build_fpn(b, config.fpn, backbone_spec, widths.fpn);
  g.pyramid_nodes = pyramid;
  build_head(b, config.head, pyramid, widths, num_classes);
  return g;
}

DecoderGraph compile_with_original_head(const FpnConfig& fpn,
                                        const std::array<FeatureSpec, 3>& backbone_spec,
                                        Widths widths, int num_classes,
                                        const CompileOptions& opts) {
  DecoderGraph g;
  Builder b{g, opts};
  auto pyramid = build_fpn(b, fpn, backbone_spec, widths.fpn);
  g.pyramid_nodes = pyramid;
  build_original_head(b, pyramid, widths, num_classes);
  return g;
}

DecoderGraph compile_with_original_fpn(const HeadConfig& head,
                                       const std::array<FeatureSpec, 3>& backbone_spec,
                                       Widths widths, int num_classes,
                                       const CompileOptions& opts) {
  DecoderGraph g;
  Builder b{g, opts};
  auto pyramid = build_original_fpn(b, backbone_spec, widths.fpn, false);
  g.pyramid_nodes = pyramid;
  build_head(b, head, pyramid, widths, num_classes);
  return g;
}

DecoderGraph compile_head_only(const HeadConfig& head,
                               const std::array<FeatureSpec, kNumLevels>& pyramid_spec,
                               int head_width, int num_classes,
                               const CompileOptions& opts) {
  DecoderGraph g;
  Builder b{g, opts};
  auto pyramid = pyramid_inputs(b, pyramid_spec);
  g.pyramid_nodes = pyramid;
  build_head(b, head, pyramid, {pyramid_spec[0].channels, head_width}, num_classes);
  return g;
}

DecoderGraph compile_original_head_only(const std::array<FeatureSpec, kNumLevels>& pyramid_spec,
                                        int head_width, int num_classes,
                                        const CompileOptions& opts) {
  DecoderGraph g;
  Builder b{g, opts};
  auto pyramid = pyramid_inputs(b, pyramid_spec);
  g.pyramid_nodes = pyramid;
  build_original_head(b, pyramid, {pyramid_spec[0].channels, head_width}, num_classes);
  return g;
}

DecoderGraph compile_fpn_only(const FpnConfig& fpn,
                              const std::array<FeatureSpec, 3>& backbone_spec,
                              int fpn_width, const CompileOptions& opts) {
  DecoderGraph g;
  Builder b{g, opts};
  g.pyramid_nodes = build_fpn(b, fpn, backbone_spec, fpn_width);
  g.widths = {fpn_width, fpn_width};
  return g;
}

DecoderGraph original_fcos_decoder(const std::array<FeatureSpec, 3>& backbone_spec,
                                   Widths widths, int num_classes,
                                   const CompileOptions& opts) {
  DecoderGraph g;
  Builder b{g, opts};
  auto pyramid = build_original_fpn(b, backbone_spec, widths.fpn, false);
  g.pyramid_nodes = pyramid;
  build_original_head(b, pyramid, widths, num_classes);
  return g;
}

DecoderGraph deform_fpn_decoder(const std::array<FeatureSpec, 3>& backbone_spec,
                                Widths widths, int num_classes,
                                const CompileOptions& opts) {
  DecoderGraph g;
  Builder b{g, opts};
  auto pyramid = build_original_fpn(b, backbone_spec, widths.fpn, true);
  g.pyramid_nodes = pyramid;
  build_original_head(b, pyramid, widths, num_classes);
  return g;
}

// ---------------------------------------------------------------------------
// parameters

namespace {

void add_norm_params(Params& p, const std::string& prefix, NormKind norm, int c) {
  if (norm == NormKind::None) return;
  p.add(prefix + ".norm.gamma", Tensor::full({c}, 1.0f));
  p.add(prefix + ".norm.beta", Tensor::zeros({c}));
  if (norm == NormKind::Batch) {
    p.add(prefix + ".norm.rm", Tensor::zeros({c}), true);
    p.add(prefix + ".norm.rv", Tensor::full({c}, 1.0f), true);
  }
}

Tensor he_init(Shape shape, int fan_in, Rng& rng) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / fan_in));
}

}  // namespace

Params init_params(const DecoderGraph& graph, Rng& rng) {
  Params p;
  const float cls_prior_bias = -std::log((1.0f - 0.01f) / 0.01f);
  for (const GraphNode& n : graph.nodes) {
    if (n.param_prefix.empty() || p.has(n.param_prefix + ".w")) continue;
    int cin = graph.at(n.inputs[0]).out.channels;
    int cout = n.out.channels;
    switch (n.op) {
      case GraphNode::Op::Conv: {
        p.add(n.param_prefix + ".w",
              he_init({cout, cin, n.kernel, n.kernel}, cin * n.kernel * n.kernel, rng));
        float bias = n.param_prefix == "head.cls" ? cls_prior_bias : 0.0f;
        p.add(n.param_prefix + ".b", Tensor::full({cout}, bias));
        add_norm_params(p, n.param_prefix, n.norm, cout);
        break;
      }
      case GraphNode::Op::SepConv: {
        p.add(n.param_prefix + ".dw",
              he_init({cin, 1, n.kernel, n.kernel}, n.kernel * n.kernel, rng));
        p.add(n.param_prefix + ".w", he_init({cout, cin, 1, 1}, cin, rng));
        p.add(n.param_prefix + ".b", Tensor::zeros({cout}));
        add_norm_params(p, n.param_prefix, n.norm, cout);
        break;
      }
      case GraphNode::Op::DeformConv: {
        // zero-initialized offsets start the op as a plain 3x3 conv
        p.add(n.param_prefix + ".off.w", Tensor::zeros({18, cin, 3, 3}));
        p.add(n.param_prefix + ".off.b", Tensor::zeros({18}));
        p.add(n.param_prefix + ".w", he_init({cout, cin, 3, 3}, cin * 9, rng));
        p.add(n.param_prefix + ".b", Tensor::zeros({cout}));
        add_norm_params(p, n.param_prefix, n.norm, cout);
        break;
      }
      case GraphNode::Op::Concat: {
        int cin2 = graph.at(n.inputs[1]).out.channels;
        p.add(n.param_prefix + ".w", he_init({cout, cin + cin2, 1, 1}, cin + cin2, rng));
        p.add(n.param_prefix + ".b", Tensor::zeros({cout}));
        add_norm_params(p, n.param_prefix, n.norm, cout);
        break;
      }
      default:
        break;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// forward

namespace {

struct Binding {
  TapeF& tape;
  Params& store;
  std::map<std::string, TapeF::Value>& bound;

  TapeF::Value operator()(const std::string& name) {
    auto it = bound.find(name);
    if (it != bound.end()) return it->second;
    auto& entry = store.entries().at(name);
    TapeF::Value v = tape.leaf(entry.value, !entry.is_buffer);
    bound.emplace(name, v);
    return v;
  }
};

TapeF::Value apply_norm_relu(TapeF& tape, Binding& bind, Params& store,
                             const GraphNode& n, TapeF::Value x, bool training) {
  if (n.norm == NormKind::Group) {
    x = tape.group_norm(x, bind(n.param_prefix + ".norm.gamma"),
                        bind(n.param_prefix + ".norm.beta"), n.norm_groups);
  } else if (n.norm == NormKind::Batch) {
    x = tape.batch_norm(x, bind(n.param_prefix + ".norm.gamma"),
                        bind(n.param_prefix + ".norm.beta"),
                        &store.get(n.param_prefix + ".norm.rm"),
                        &store.get(n.param_prefix + ".norm.rv"), training);
  }
  if (n.relu) x = tape.relu(x);
  return x;
}

}  // namespace

ForwardResult forward(TapeF& tape, const DecoderGraph& graph, Params& params,
                      const std::vector<Tensor>& inputs, bool training) {
  std::vector<TapeF::Value> values;
  values.reserve(inputs.size());
  for (const Tensor& t : inputs) values.push_back(tape.constant(t));
  return forward_values(tape, graph, params, values, training);
}

ForwardResult forward_values(TapeF& tape, const DecoderGraph& graph,
                             Params& params,
                             const std::vector<TapeF::Value>& inputs,
                             bool training) {
  NFCS_REQUIRE(inputs.size() == graph.input_nodes.size(), "expected ",
               graph.input_nodes.size(), " input tensors, got ", inputs.size());
  if (graph.input_nodes.size() == 3) g_fpn_forward_count.fetch_add(1);

  ForwardResult result;
  Binding bind{tape, params, result.bound_params};
  std::vector<TapeF::Value> values(graph.nodes.size(), nullptr);

  for (size_t i = 0; i < graph.input_nodes.size(); i++) {
    int id = graph.input_nodes[i];
    const FeatureSpec& spec = graph.at(id).out;
    const auto& t = inputs[i]->value;
    NFCS_REQUIRE(t.ndim() == 4 && t.dim(1) == spec.channels &&
                     t.dim(2) == spec.height && t.dim(3) == spec.width,
                 "input ", i, " shape ", shape_str(t.shape()),
                 " does not match spec (c=", spec.channels, ",h=", spec.height,
                 ",w=", spec.width, ")");
    values[static_cast<size_t>(id)] = inputs[i];
  }

  for (size_t i = 0; i < graph.nodes.size(); i++) {
    const GraphNode& n = graph.nodes[i];
    if (n.op == GraphNode::Op::Input) continue;
    TapeF::Value x = values[static_cast<size_t>(n.inputs[0])];
    NFCS_REQUIRE(x != nullptr, "node ", i, " evaluated before its input");
    TapeF::Value out = nullptr;
    switch (n.op) {
      case GraphNode::Op::Skip:
        out = x;
        break;
      case GraphNode::Op::Resize:
        out = tape.bilinear_resize(x, n.out.height, n.out.width);
        break;
      case GraphNode::Op::Sum:
        out = tape.add(x, values[static_cast<size_t>(n.inputs[1])]);
        break;
      case GraphNode::Op::Conv:
        out = tape.conv2d(x, bind(n.param_prefix + ".w"), bind(n.param_prefix + ".b"),
                          n.stride, n.dilation, 1);
        out = apply_norm_relu(tape, bind, params, n, out, training);
        break;
      case GraphNode::Op::SepConv: {
        int c = graph.at(n.inputs[0]).out.channels;
        out = tape.conv2d(x, bind(n.param_prefix + ".dw"), nullptr, 1, n.dilation, c);
        out = tape.conv2d(out, bind(n.param_prefix + ".w"), bind(n.param_prefix + ".b"),
                          1, 1, 1);
        out = apply_norm_relu(tape, bind, params, n, out, training);
        break;
      }
      case GraphNode::Op::DeformConv: {
        TapeF::Value off = tape.conv2d(x, bind(n.param_prefix + ".off.w"),
                                       bind(n.param_prefix + ".off.b"), 1, 1, 1);
        out = tape.deform_conv2d(x, bind(n.param_prefix + ".w"),
                                 bind(n.param_prefix + ".b"), off);
        out = apply_norm_relu(tape, bind, params, n, out, training);
        break;
      }
      case GraphNode::Op::Concat: {
        out = tape.concat_channels({x, values[static_cast<size_t>(n.inputs[1])]});
        out = tape.conv2d(out, bind(n.param_prefix + ".w"), bind(n.param_prefix + ".b"),
                          1, 1, 1);
        out = apply_norm_relu(tape, bind, params, n, out, training);
        break;
      }
      case GraphNode::Op::Input:
        break;
    }
    values[i] = out;
  }

  for (int l = 0; l < kNumLevels; l++) {
    int id = graph.pyramid_nodes[static_cast<size_t>(l)];
    if (id >= 0) result.pyramid[static_cast<size_t>(l)] = values[static_cast<size_t>(id)];
  }
  if (graph.has_head()) {
    for (int l = 0; l < kNumLevels; l++) {
      const auto& h = graph.head_outputs[static_cast<size_t>(l)];
      LevelPrediction p;
      p.stride = kLevelStrides[static_cast<size_t>(l)];
      p.cls = values[static_cast<size_t>(h.cls)];
      p.ctr = values[static_cast<size_t>(h.ctr)];
      // distances stay positive: exp of the raw output scaled by the stride
      p.reg = tape.mul_scalar(tape.exp(values[static_cast<size_t>(h.reg)]),
                              static_cast<float>(p.stride));
      result.preds[static_cast<size_t>(l)] = p;
    }
  }
  return result;
}

TapeF::Value assemble_prediction(TapeF& tape, const LevelPrediction& p) {
  return tape.concat_channels({p.cls, p.reg, p.ctr});
}

std::map<std::string, Tensor> collect_grads(const ForwardResult& result) {
  std::map<std::string, Tensor> grads;
  for (const auto& [name, node] : result.bound_params)
    if (node->grad.defined()) grads.emplace(name, node->grad);
  return grads;
}

uint64_t fpn_forward_count() { return g_fpn_forward_count.load(); }

std::string to_dot(const DecoderGraph& graph) {
  std::ostringstream os;
  os << "digraph decoder {\n  rankdir=TB;\n  node [shape=box,fontsize=10];\n";
  for (size_t i = 0; i < graph.nodes.size(); i++) {
    const GraphNode& n = graph.nodes[i];
    const char* kind = "";
    switch (n.op) {
      case GraphNode::Op::Input: kind = "input"; break;
      case GraphNode::Op::Conv: kind = "conv"; break;
      case GraphNode::Op::SepConv: kind = "sep"; break;
      case GraphNode::Op::DeformConv: kind = "dconv"; break;
      case GraphNode::Op::Skip: kind = "skip"; break;
      case GraphNode::Op::Sum: kind = "sum"; break;
      case GraphNode::Op::Concat: kind = "cat"; break;
      case GraphNode::Op::Resize: kind = "resize"; break;
    }
    os << "  n" << i << " [label=\"" << n.label << "\\n" << kind << " "
       << n.out.channels << "x" << n.out.height << "x" << n.out.width << "\"];\n";
  }
  for (size_t i = 0; i < graph.nodes.size(); i++)
    for (int in : graph.nodes[i].inputs) os << "  n" << in << " -> n" << i << ";\n";
  for (int l = 0; l < kNumLevels; l++) {
    int id = graph.pyramid_nodes[static_cast<size_t>(l)];
    if (id >= 0)
      os << "  p" << (l + 3) << " [shape=ellipse];\n  n" << id << " -> p"
         << (l + 3) << ";\n";
  }
  os << "}\n";
  return os.str();
}

}  // namespace nfcs
