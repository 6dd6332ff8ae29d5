#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "gradient_suite.hpp"
#include "nfcs/params.hpp"
#include "nfcs/tape.hpp"
#include "testutil.hpp"

using namespace nfcs;
using namespace nfcs::testutil;
using TapeF = Tape<float>;
using TapeD = Tape<double>;

TEST_CASE("conv2d 1x1 identity kernel passes input through") {
  Rng rng(1);
  TapeF tape;
  Tensor x = Tensor::randn({2, 3, 5, 4}, rng);
  Tensor w = Tensor::zeros({3, 3, 1, 1});
  for (int c = 0; c < 3; c++) w.at4(c, c, 0, 0) = 1.0f;
  auto y = tape.conv2d(tape.constant(x.clone()), tape.constant(w),
                       tape.constant(Tensor::zeros({3})), 1, 1, 1);
  REQUIRE(y->value.shape() == x.shape());
  for (size_t i = 0; i < x.numel(); i++) CHECK(y->value[i] == doctest::Approx(x[i]));
}

TEST_CASE("dilation 3 on a 3x3 kernel spans a 7-wide receptive field") {
  TapeF tape;
  Tensor x = Tensor::zeros({1, 1, 9, 9});
  x.at4(0, 0, 4, 4) = 1.0f;
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
  auto y = tape.conv2d(tape.constant(x), tape.constant(w),
                       tape.constant(Tensor::zeros({1})), 1, 3, 1);
  // the delta is visible exactly at offsets {-3,0,3} in each axis
  for (int i = 0; i < 9; i++)
    for (int j = 0; j < 9; j++) {
      bool hit = (std::abs(i - 4) == 0 || std::abs(i - 4) == 3) &&
                 (std::abs(j - 4) == 0 || std::abs(j - 4) == 3);
      CHECK(y->value.at4(0, 0, i, j) == (hit ? 1.0f : 0.0f));
    }
}

TEST_CASE("conv2d SAME output sizes under stride") {
  TapeF tape;
  Rng rng(2);
  auto y = tape.conv2d(tape.constant(Tensor::randn({1, 2, 7, 9}, rng)),
                       tape.constant(Tensor::randn({4, 2, 3, 3}, rng)),
                       nullptr, 2, 1, 1);
  CHECK(y->value.shape() == Shape{1, 4, 4, 5});
}

TEST_CASE("deform_conv2d with zero offsets reduces to conv2d") {
  Rng rng(3);
  TapeF tape;
  Tensor x = Tensor::randn({2, 3, 6, 5}, rng);
  Tensor w = Tensor::randn({4, 3, 3, 3}, rng);
  Tensor b = Tensor::randn({4}, rng);
  auto xv = tape.constant(x.clone());
  auto wv = tape.constant(w.clone());
  auto bv = tape.constant(b.clone());
  auto ref = tape.conv2d(xv, wv, bv, 1, 1, 1);
  auto got = tape.deform_conv2d(xv, wv, bv,
                                tape.constant(Tensor::zeros({2, 18, 6, 5})));
  for (size_t i = 0; i < ref->value.numel(); i++)
    CHECK(got->value[i] == doctest::Approx(ref->value[i]).epsilon(1e-5));
}

TEST_CASE("deform_conv2d with +1 integer x-shift matches shifted conv interior") {
  Rng rng(4);
  TapeF tape;
  Tensor x = Tensor::randn({1, 2, 6, 6}, rng);
  Tensor w = Tensor::randn({3, 2, 3, 3}, rng);
  Tensor off = Tensor::zeros({1, 18, 6, 6});
  for (int k = 0; k < 9; k++)
    for (int i = 0; i < 36; i++) off[static_cast<size_t>(2 * k + 1) * 36 + i] = 1.0f;
  auto got = tape.deform_conv2d(tape.constant(x.clone()), tape.constant(w.clone()),
                                nullptr, tape.constant(off));
  // shift input left by one pixel, then plain conv
  Tensor xs = Tensor::zeros({1, 2, 6, 6});
  for (int c = 0; c < 2; c++)
    for (int y = 0; y < 6; y++)
      for (int xx = 0; xx < 5; xx++) xs.at4(0, c, y, xx) = x.at4(0, c, y, xx + 1);
  auto ref = tape.conv2d(tape.constant(xs), tape.constant(w.clone()), nullptr, 1, 1, 1);
  for (int c = 0; c < 3; c++)
    for (int y = 1; y < 5; y++)
      for (int xx = 1; xx < 4; xx++)
        CHECK(got->value.at4(0, c, y, xx) ==
              doctest::Approx(ref->value.at4(0, c, y, xx)).epsilon(1e-4));
}

TEST_CASE("group_norm normalizes per group") {
  Rng rng(5);
  TapeF tape;
  int groups = 4;
  auto y = tape.group_norm(tape.constant(Tensor::randn({2, 8, 4, 4}, rng, 3.0)),
                           tape.constant(Tensor::full({8}, 1.0f)),
                           tape.constant(Tensor::zeros({8})), groups);
  for (int n = 0; n < 2; n++)
    for (int g = 0; g < groups; g++) {
      double mu = 0, var = 0;
      for (int c = g * 2; c < g * 2 + 2; c++)
        for (int i = 0; i < 16; i++) mu += y->value.at4(n, c, i / 4, i % 4);
      mu /= 32;
      for (int c = g * 2; c < g * 2 + 2; c++)
        for (int i = 0; i < 16; i++) {
          double d = y->value.at4(n, c, i / 4, i % 4) - mu;
          var += d * d;
        }
      var /= 32;
      CHECK(std::abs(mu) < 1e-6);
      CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("group_norm rejects indivisible channel counts") {
  TapeF tape;
  Rng rng(6);
  CHECK_THROWS_AS(tape.group_norm(tape.constant(Tensor::randn({1, 6, 2, 2}, rng)),
                                  tape.constant(Tensor::full({6}, 1.0f)),
                                  tape.constant(Tensor::zeros({6})), 4),
                  Error);
}

TEST_CASE("groups == channels behaves as instance norm") {
  Rng rng(7);
  TapeF tape;
  Tensor x = Tensor::randn({1, 3, 5, 5}, rng, 2.0);
  auto y = tape.group_norm(tape.constant(x.clone()),
                           tape.constant(Tensor::full({3}, 1.0f)),
                           tape.constant(Tensor::zeros({3})), 3);
  for (int c = 0; c < 3; c++) {
    double mu = 0;
    for (int i = 0; i < 25; i++) mu += y->value.at4(0, c, i / 5, i % 5);
    CHECK(std::abs(mu / 25) < 1e-6);
  }
}

TEST_CASE("bilinear_resize keeps constants constant") {
  TapeF tape;
  auto y = tape.bilinear_resize(tape.constant(Tensor::full({1, 2, 3, 5}, 2.5f)), 7, 4);
  for (size_t i = 0; i < y->value.numel(); i++) CHECK(y->value[i] == doctest::Approx(2.5f));
}

TEST_CASE("bilinear 2x upsample of a delta gives the half-pixel tent") {
  TapeF tape;
  Tensor x = Tensor::zeros({1, 1, 2, 2});
  x.at4(0, 0, 0, 0) = 1.0f;
  auto y = tape.bilinear_resize(tape.constant(x), 4, 4);
  // src = (o + 0.5)/2 - 0.5 per axis: weights on index 0 are [1, .75, .25, 0]
  float w1[4] = {1.0f, 0.75f, 0.25f, 0.0f};
  for (int i = 0; i < 4; i++)
    for (int j = 0; j < 4; j++)
      CHECK(y->value.at4(0, 0, i, j) == doctest::Approx(w1[i] * w1[j]));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(8);
  TapeF tape;
  auto y = tape.softmax(tape.constant(Tensor::randn({5, 9}, rng, 4.0)));
  for (int i = 0; i < 5; i++) {
    double s = 0;
    for (int j = 0; j < 9; j++) s += y->value[static_cast<size_t>(i) * 9 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("lstm_cell matches the gate equations") {
  Rng rng(9);
  TapeD tape;
  int b = 2, in = 3, hid = 2;
  TensorD x = rand_tensor({b, in}, rng), h = rand_tensor({b, hid}, rng),
          c = rand_tensor({b, hid}, rng), wih = rand_tensor({4 * hid, in}, rng),
          whh = rand_tensor({4 * hid, hid}, rng), bias = rand_tensor({4 * hid}, rng);
  auto [h2, c2] = tape.lstm_cell(tape.constant(x.clone()), tape.constant(h.clone()),
                                 tape.constant(c.clone()), tape.constant(wih.clone()),
                                 tape.constant(whh.clone()), tape.constant(bias.clone()));
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (int bi = 0; bi < b; bi++)
    for (int j = 0; j < hid; j++) {
      double gate[4];
      for (int g = 0; g < 4; g++) {
        double acc = bias[static_cast<size_t>(g * hid + j)];
        for (int k = 0; k < in; k++)
          acc += wih[static_cast<size_t>(g * hid + j) * in + k] * x[static_cast<size_t>(bi) * in + k];
        for (int k = 0; k < hid; k++)
          acc += whh[static_cast<size_t>(g * hid + j) * hid + k] * h[static_cast<size_t>(bi) * hid + k];
        gate[g] = acc;
      }
      double cn = sig(gate[1]) * c[static_cast<size_t>(bi) * hid + j] +
                  sig(gate[0]) * std::tanh(gate[2]);
      double hn = sig(gate[3]) * std::tanh(cn);
      CHECK(c2->value[static_cast<size_t>(bi) * hid + j] == doctest::Approx(cn).epsilon(1e-12));
      CHECK(h2->value[static_cast<size_t>(bi) * hid + j] == doctest::Approx(hn).epsilon(1e-12));
    }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ParamsT<double> p;
  p.add("w", TensorD::from({3}, {1.0, -2.0, 0.5}));
  std::map<std::string, TensorD> g{{"w", TensorD::zeros({3})}};
  adam_step<double>(p, g, 0.1, 0.9, 0.999, 1e-8, 1);
  CHECK(p.get("w")[0] == 1.0);
  CHECK(p.get("w")[1] == -2.0);
  CHECK(p.get("w")[2] == 0.5);
}

TEST_CASE("adam: two-step scalar trajectory matches hand arithmetic") {
  ParamsT<double> p;
  p.add("w", TensorD::from({1}, {1.0}));
  std::map<std::string, TensorD> g1{{"w", TensorD::from({1}, {0.5})}};
  std::map<std::string, TensorD> g2{{"w", TensorD::from({1}, {0.25})}};
  adam_step<double>(p, g1, 0.1, 0.9, 0.999, 1e-8, 1);
  CHECK(std::abs(p.get("w")[0] - 0.900000002) < 1e-10);
  adam_step<double>(p, g2, 0.1, 0.9, 0.999, 1e-8, 2);
  CHECK(std::abs(p.get("w")[0] - 0.8067820404774624) < 1e-10);
}

TEST_CASE("polyak: decay 0 copies, constant source converges geometrically") {
  ParamsT<double> avg, src;
  avg.add("w", TensorD::from({1}, {0.0}));
  src.add("w", TensorD::from({1}, {1.0}));
  ParamsT<double> copy = avg.clone_values();
  polyak_update<double>(copy, src, 0.0);
  CHECK(copy.get("w")[0] == 1.0);
  double d = 0.7;
  for (int n = 1; n <= 12; n++) {
    polyak_update<double>(avg, src, d);
    CHECK(std::abs(avg.get("w")[0] - 1.0) <= std::pow(d, n) + 1e-12);
  }
}

TEST_CASE("polyak: 5-step trajectory equals the closed-form EMA") {
  double d = 0.9;
  double vals[5] = {0.3, -1.2, 2.0, 0.7, -0.4};
  ParamsT<double> avg, src;
  avg.add("w", TensorD::from({1}, {0.5}));
  src.add("w", TensorD::from({1}, {0.0}));
  double closed = 0.5;
  for (int i = 0; i < 5; i++) closed *= d;  // decay of the initial value
  double acc = 0.0;
  for (int i = 0; i < 5; i++) acc += (1 - d) * std::pow(d, 4 - i) * vals[i];
  closed += acc;
  for (double v : vals) {
    src.get("w")[0] = v;
    polyak_update<double>(avg, src, d);
  }
  CHECK(std::abs(avg.get("w")[0] - closed) < 1e-12);
}

TEST_CASE("forward determinism: identical inputs give bitwise identical outputs") {
  Rng rng(11);
  Tensor x = Tensor::randn({2, 4, 8, 8}, rng);
  Tensor w = Tensor::randn({4, 4, 3, 3}, rng);
  Tensor b = Tensor::randn({4}, rng);
  auto run = [&]() {
    TapeF tape;
    auto y = tape.conv2d(tape.constant(x.clone()), tape.constant(w.clone()),
                         tape.constant(b.clone()), 1, 1, 1);
    auto z = tape.group_norm(y, tape.constant(Tensor::full({4}, 1.0f)),
                             tape.constant(Tensor::zeros({4})), 2);
    return z->value.clone();
  };
  Tensor a = run(), c = run();
  for (size_t i = 0; i < a.numel(); i++) CHECK(a[i] == c[i]);
}

TEST_CASE("checkpoint round-trips and rejects bad headers") {
  Rng rng(12);
  Params p;
  p.add("conv.w", Tensor::randn({4, 3, 3, 3}, rng));
  p.add("bn.running_mean", Tensor::randn({4}, rng), true);
  std::ostringstream os(std::ios::binary);
  save_params(p, os);
  std::istringstream is(os.str(), std::ios::binary);
  Params q = load_params<float>(is);
  REQUIRE(q.size() == 2);
  CHECK(q.entries().at("bn.running_mean").is_buffer);
  for (size_t i = 0; i < p.get("conv.w").numel(); i++)
    CHECK(p.get("conv.w")[i] == q.get("conv.w")[i]);

  std::string bad = os.str();
  bad[0] = 'X';
  std::istringstream bs(bad, std::ios::binary);
  CHECK_THROWS_AS(load_params<float>(bs), Error);

  std::string badver = os.str();
  badver[4] = 9;
  std::istringstream vs(badver, std::ios::binary);
  CHECK_THROWS_AS(load_params<float>(vs), Error);
}

TEST_CASE("gradient suite (reduced seeds) stays under 1e-4") {
  auto reports = run_gradient_suite(3);
  for (const auto& r : reports) {
    INFO(r.op);
    CHECK(r.max_err < 1e-4);
  }
}
