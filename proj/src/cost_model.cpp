#include "nfcs/cost_model.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace nfcs {

namespace {

struct NodeCost {
  uint64_t macs = 0;
  uint64_t params = 0;
};

NodeCost node_cost(const DecoderGraph& g, const GraphNode& n) {
  NodeCost c;
  uint64_t hw = static_cast<uint64_t>(n.out.height) * n.out.width;
  uint64_t cout = static_cast<uint64_t>(n.out.channels);
  uint64_t elements = cout * hw;
  uint64_t cin = n.inputs.empty()
                     ? 0
                     : static_cast<uint64_t>(g.at(n.inputs[0]).out.channels);
  switch (n.op) {
    case GraphNode::Op::Input:
    case GraphNode::Op::Skip:
      return c;
    case GraphNode::Op::Resize:
      c.macs = 4 * elements;
      return c;
    case GraphNode::Op::Sum:
      c.macs = elements;
      return c;
    case GraphNode::Op::Conv: {
      uint64_t k = static_cast<uint64_t>(n.kernel);
      c.macs = k * k * cin * cout * hw;
      c.params = k * k * cin * cout + cout;
      break;
    }
    case GraphNode::Op::SepConv: {
      uint64_t k = static_cast<uint64_t>(n.kernel);
      c.macs = k * k * cin * hw + cin * cout * hw;
      c.params = k * k * cin + cin * cout + cout;
      break;
    }
    case GraphNode::Op::DeformConv: {
      c.macs = 9 * cin * 18 * hw        // offset prediction
               + 9 * cin * cout * hw    // main conv
               + 4 * 9 * cin * hw;      // bilinear sampling
      c.params = 9 * cin * 18 + 18 + 9 * cin * cout + cout;
      break;
    }
    case GraphNode::Op::Concat: {
      uint64_t cin2 = static_cast<uint64_t>(g.at(n.inputs[1]).out.channels);
      c.macs = (cin + cin2) * cout * hw;
      c.params = (cin + cin2) * cout + cout;
      break;
    }
  }
  if (n.norm != NormKind::None) {
    c.macs += 2 * elements;
    c.params += 2 * cout;
  }
  if (n.relu) c.macs += 2 * elements;
  return c;
}

}  // namespace

CostReport cost(const DecoderGraph& graph) {
  CostReport report;
  std::set<std::string> seen_prefix;
  for (const GraphNode& n : graph.nodes) {
    NodeCost c = node_cost(graph, n);
    bool first_use = n.param_prefix.empty() || seen_prefix.insert(n.param_prefix).second;
    CostRow row;
    row.label = n.label;
    row.macs = c.macs;
    row.params = first_use ? c.params : 0;
    report.macs += row.macs;
    report.params += row.params;
    if (row.macs || row.params) report.rows.push_back(std::move(row));
  }
  return report;
}

std::string cost_csv(const CostReport& report) {
  std::ostringstream os;
  os << "# FLOPs reported as MACs (1 MAC = 1 FLOP); shared-weight nodes count "
        "params once\n";
  os << "node,macs,params\n";
  for (const CostRow& r : report.rows)
    os << r.label << "," << r.macs << "," << r.params << "\n";
  os << "total," << report.macs << "," << report.params << "\n";
  return os.str();
}

CostComparison compare(const std::vector<std::pair<std::string, CostReport>>& reports) {
  CostComparison cmp;
  for (const auto& [name, r] : reports) cmp.entries.push_back({name, r.macs, r.params});
  return cmp;
}

std::string CostComparison::table() const {
  std::vector<size_t> order(entries.size());
  for (size_t i = 0; i < order.size(); i++) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return entries[a].macs < entries[b].macs;
  });
  std::ostringstream os;
  os << "name,macs,params,macs_rank\n";
  std::vector<size_t> rank(entries.size());
  for (size_t i = 0; i < order.size(); i++) rank[order[i]] = i + 1;
  for (size_t i = 0; i < entries.size(); i++)
    os << entries[i].name << "," << entries[i].macs << "," << entries[i].params
       << "," << rank[i] << "\n";
  return os.str();
}

HeadConfig reference_searched_head() {
  // six slots, four active ops with two skips, the dconv + 1x1 pairing,
  // fully shared weights
  HeadConfig h;
  h.ops = {OpKind::DeformConv3x3, OpKind::Skip, OpKind::Conv1x1,
           OpKind::DeformConv3x3, OpKind::Skip, OpKind::Conv1x1};
  h.share_from = 0;
  return h;
}

FpnConfig reference_searched_fpn() {
  // deformable convs with concat aggregation dominate the reported structure
  FpnConfig f;
  f.blocks[0] = {2, 1, OpKind::DeformConv3x3, OpKind::Skip, AggKind::ConcatProj};
  f.blocks[1] = {3, 0, OpKind::DeformConv3x3, OpKind::SepConv3x3Dil3, AggKind::ConcatProj};
  f.blocks[2] = {4, 1, OpKind::Skip, OpKind::DeformConv3x3, AggKind::Sum};
  f.blocks[3] = {5, 2, OpKind::DeformConv3x3, OpKind::Skip, AggKind::ConcatProj};
  f.blocks[4] = {3, 5, OpKind::DeformConv3x3, OpKind::DeformConv3x3, AggKind::ConcatProj};
  f.blocks[5] = {6, 4, OpKind::Skip, OpKind::DeformConv3x3, AggKind::Sum};
  f.blocks[6] = {7, 6, OpKind::DeformConv3x3, OpKind::Skip, AggKind::ConcatProj};
  return f;
}

}  // namespace nfcs
