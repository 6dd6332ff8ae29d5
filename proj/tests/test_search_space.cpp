#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <set>

#include "nfcs/search_space.hpp"

using namespace nfcs;

static DecoderConfig uniform_skip_config() {
  DecoderConfig c;
  for (auto& b : c.fpn.blocks) b = {0, 0, OpKind::Skip, OpKind::Skip, AggKind::Sum};
  for (auto& op : c.head.ops) op = OpKind::Conv3x3;
  c.head.share_from = 0;
  return c;
}

TEST_CASE("encode maps the all-skip config to its direct token ids") {
  std::vector<int> t = encode(uniform_skip_config());
  REQUIRE(t.size() == 42);
  for (int blk = 0; blk < 7; blk++) {
    CHECK(t[blk * 5 + 0] == 0);
    CHECK(t[blk * 5 + 1] == 0);
    CHECK(t[blk * 5 + 2] == 3);
    CHECK(t[blk * 5 + 3] == 3);
    CHECK(t[blk * 5 + 4] == 0);
  }
  for (int j = 0; j < 6; j++) CHECK(t[35 + j] == 6);
  CHECK(t[41] == 0);
}

TEST_CASE("encode rejects a pool index outside block 3's vocabulary") {
  DecoderConfig c = uniform_skip_config();
  c.fpn.blocks[2].id1 = 6;  // pool at block 3 has size 5
  CHECK_THROWS_AS(encode(c), Error);
}

TEST_CASE("decode rejects wrong length and out-of-vocab tokens") {
  std::vector<int> t = encode(uniform_skip_config());
  std::vector<int> short_t(t.begin(), t.end() - 1);
  CHECK_THROWS_AS(decode(short_t), Error);
  t[0] = 3;  // block 1 pool has size 3
  CHECK_THROWS_AS(decode(t), Error);
}

TEST_CASE("head op token 5 at position 36 decodes to Conv1x1") {
  std::vector<int> t = encode(uniform_skip_config());
  t[36] = 5;
  CHECK(decode(t).head.ops[1] == OpKind::Conv1x1);
  t[36] = 4;
  CHECK(decode(t).head.ops[1] == OpKind::DeformConv3x3);
}

TEST_CASE("encode/decode round-trips over 10k fuzzed configs") {
  Rng rng(20240710);
  for (int i = 0; i < 10000; i++) {
    DecoderConfig c = sample_uniform(rng);
    DecoderConfig back = decode(encode(c));
    REQUIRE(back == c);
  }
}

TEST_CASE("action spaces follow the pool-size recurrence") {
  ActionSpace f = action_space(SearchStage::FpnOnly);
  REQUIRE(f.length() == 35);
  std::vector<int> expect;
  for (int t = 1; t <= 7; t++) {
    expect.insert(expect.end(), {t + 2, t + 2, 5, 5, 2});
  }
  CHECK(f.vocab_sizes == expect);

  ActionSpace h = action_space(SearchStage::HeadOnly);
  CHECK(h.vocab_sizes == std::vector<int>{7, 7, 7, 7, 7, 7, 7});

  ActionSpace j = action_space(SearchStage::Joint);
  REQUIRE(j.length() == 42);
  std::vector<int> joined = expect;
  joined.insert(joined.end(), h.vocab_sizes.begin(), h.vocab_sizes.end());
  CHECK(j.vocab_sizes == joined);
}

TEST_CASE("space_size: head count and joint factorization") {
  CHECK(u128_str(space_size(SearchStage::HeadOnly)) == "823543");
  unsigned __int128 f = space_size(SearchStage::FpnOnly);
  // closed form: prod_t (t+2)^2 * 5 * 5 * 2
  unsigned __int128 expect = 1;
  for (int t = 1; t <= 7; t++)
    expect *= static_cast<unsigned>((t + 2) * (t + 2) * 50);
  CHECK(u128_str(f) == u128_str(expect));
  CHECK(u128_str(space_size(SearchStage::Joint)) ==
        u128_str(f * space_size(SearchStage::HeadOnly)));
}

TEST_CASE("space_size formula equals exhaustive enumeration on reduced spaces") {
  // reduced head: 2 positions, vocab 7 each
  {
    std::vector<int> vocab{7, 7};
    std::set<std::vector<int>> seen;
    for (int a = 0; a < 7; a++)
      for (int b = 0; b < 7; b++) seen.insert({a, b});
    CHECK(u128_str(space_size_of(vocab)) == std::to_string(seen.size()));
  }
  // reduced FPN: 2 blocks, 2 ops, 1 aggregation
  {
    std::vector<int> vocab{3, 3, 2, 2, 1, 4, 4, 2, 2, 1};
    std::set<std::vector<int>> seen;
    std::vector<int> cur(vocab.size(), 0);
    std::function<void(size_t)> rec = [&](size_t pos) {
      if (pos == vocab.size()) {
        seen.insert(cur);
        return;
      }
      for (int v = 0; v < vocab[pos]; v++) {
        cur[pos] = v;
        rec(pos + 1);
      }
    };
    rec(0);
    CHECK(u128_str(space_size_of(vocab)) == std::to_string(seen.size()));
    CHECK(seen.size() == 9u * 4u * 16u * 4u);
  }
}

TEST_CASE("sample_uniform is deterministic per seed and always valid") {
  Rng a(77), b(77);
  for (int i = 0; i < 100; i++) {
    DecoderConfig ca = sample_uniform(a);
    DecoderConfig cb = sample_uniform(b);
    CHECK(ca == cb);
    CHECK_NOTHROW(validate(ca));
  }
}

TEST_CASE("sample_uniform token frequencies stay within 5 sigma of uniform") {
  Rng rng(99);
  const int n = 10000;
  ActionSpace space = action_space(SearchStage::Joint);
  std::vector<std::map<int, int>> counts(static_cast<size_t>(space.length()));
  for (int i = 0; i < n; i++) {
    std::vector<int> t = sample_uniform_tokens(space, rng);
    for (size_t p = 0; p < t.size(); p++) counts[p][t[p]]++;
  }
  for (size_t p = 0; p < counts.size(); p++) {
    int vocab = space.vocab_sizes[p];
    double mean = static_cast<double>(n) / vocab;
    double sigma = std::sqrt(n * (1.0 / vocab) * (1.0 - 1.0 / vocab));
    for (int v = 0; v < vocab; v++) {
      double c = counts[p].count(v) ? counts[p][v] : 0;
      INFO("position ", p, " value ", v);
      CHECK(std::abs(c - mean) < 5.0 * sigma);
    }
  }
}

TEST_CASE("no FPN position ever decodes to a head-only op") {
  Rng rng(123);
  for (int i = 0; i < 2000; i++) {
    DecoderConfig c = sample_uniform(rng);
    for (const auto& b : c.fpn.blocks) {
      CHECK(static_cast<int>(b.op1) < 5);
      CHECK(static_cast<int>(b.op2) < 5);
    }
  }
}

TEST_CASE("pretty form renders block and head structure") {
  DecoderConfig c = uniform_skip_config();
  c.fpn.blocks[0] = {0, 1, OpKind::DeformConv3x3, OpKind::SepConv3x3, AggKind::ConcatProj};
  std::string s = pretty(c);
  CHECK(s.find("bb1(c3,c4|dconv3,sep3|cat)") != std::string::npos);
  CHECK(s.find("share=0") != std::string::npos);
}
