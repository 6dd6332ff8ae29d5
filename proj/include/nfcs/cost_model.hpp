#pragma once

#include <string>
#include <vector>

#include "nfcs/decoder_graph.hpp"

namespace nfcs {

// Analytic multiply-accumulate and parameter counts over a compiled graph.
//
// Counting convention ("FLOPs" are MACs, 1 MAC = 1 FLOP):
//   conv kxk            k*k*Cin*Cout*HW / groups     params k*k*Cin*Cout/g + Cout
//   separable conv      depthwise + pointwise        bias on the pointwise only
//   deformable conv     offset conv + main conv + 4 MACs per bilinear sample
//                       per input channel (9 taps)
//   norm / activation   2 * elements                 norm affine = 2*C learnable
//   sum                 1 * elements
//   bilinear resize     4 * elements
//   skip                free
// Nodes sharing a param_prefix share weights and are counted once for params.

struct CostRow {
  std::string label;
  uint64_t macs = 0;
  uint64_t params = 0;
};

struct CostReport {
  uint64_t macs = 0;
  uint64_t params = 0;
  std::vector<CostRow> rows;
};

CostReport cost(const DecoderGraph& graph);

std::string cost_csv(const CostReport& report);

struct CostComparison {
  struct Entry {
    std::string name;
    uint64_t macs = 0;
    uint64_t params = 0;
  };
  std::vector<Entry> entries;  // input order preserved
  std::string table() const;  // adds a cheapest-first ordering column
};

CostComparison compare(const std::vector<std::pair<std::string, CostReport>>& reports);

// Reference structures reconstructed from the published description of the
// discovered decoder; used for cost comparisons and demos.
HeadConfig reference_searched_head();
FpnConfig reference_searched_fpn();

}  // namespace nfcs
