#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <filesystem>

#include "nfcs/orchestrator.hpp"

using namespace nfcs;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& tag) {
  std::string d = (fs::temp_directory_path() / ("nfcs_test_" + tag)).string();
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

SearchPlan tiny_plan(const std::string& cache_tag) {
  SearchPlan p;
  p.seed = 11;
  p.n_images = 16;
  p.proxy_batch = 2;
  p.proxy_iterations = 20;
  p.fpn_width = 8;
  p.head_width = 8;
  p.backbone_iterations = 30;
  p.backbone_batch = 2;
  p.archs_fpn = 12;
  p.archs_head = 12;
  p.controller_batch = 6;
  p.top_k_fpn = 4;
  p.top_k_head = 3;
  p.jobs = 2;
  p.cache_dir = fresh_dir("cache_" + cache_tag);
  return p;
}

// one shared prepared task keeps the suite fast
const PreparedTask& shared_prepared() {
  static PreparedTask prep = prepare(tiny_plan("shared"));
  return prep;
}

double time_secs(const std::function<void()>& fn) {
  auto t0 = std::chrono::steady_clock::now();
  fn();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

TEST_CASE("plan serialization round-trips and hashes stably") {
  SearchPlan p = tiny_plan("planck");
  SearchPlan q = SearchPlan::from_json(p.to_json());
  CHECK(p.hash() == q.hash());
  q.fpn_width = 16;
  CHECK(p.hash() != q.hash());
  CHECK_THROWS_AS(SearchPlan::from_json({{"reward_mode", "banana"}}), Error);
}

TEST_CASE("prepare: split is disjoint 70/30 and features have the documented shapes") {
  const PreparedTask& prep = shared_prepared();
  CHECK(prep.train_idx.size() + prep.val_idx.size() == 16);
  CHECK(prep.train_idx.size() == 11);  // floor(0.7 * 16)
  std::set<int> train(prep.train_idx.begin(), prep.train_idx.end());
  for (int v : prep.val_idx) CHECK(!train.count(v));
  REQUIRE(prep.features.size() == 16);
  CHECK(prep.features[0][0].shape() == Shape{64, 16, 16});
  CHECK(prep.features[0][1].shape() == Shape{128, 8, 8});
  CHECK(prep.features[0][2].shape() == Shape{128, 4, 4});
}

TEST_CASE("prepare: second invocation is a cache hit with identical features") {
  SearchPlan plan = shared_prepared().plan;
  double t = 0;
  PreparedTask again;
  t = time_secs([&] { again = prepare(plan); });
  CHECK(again.cache_hit);
  CHECK(t < 5.0);  // no retraining
  CHECK(again.backbone_hash == shared_prepared().backbone_hash);
  for (size_t i = 0; i < again.features.size(); i++)
    for (int f = 0; f < 3; f++)
      for (size_t j = 0; j < again.features[i][static_cast<size_t>(f)].numel(); j++)
        REQUIRE(again.features[i][static_cast<size_t>(f)][j] ==
                shared_prepared().features[i][static_cast<size_t>(f)][j]);
  // a missing cache is an explicit, actionable error when required
  SearchPlan cold = plan;
  cold.cache_dir = fresh_dir("cache_cold");
  CHECK_THROWS_WITH_AS(prepare(cold, true), doctest::Contains("prepare"), Error);
}

TEST_CASE("cached features equal a live backbone recomputation bitwise") {
  const PreparedTask& prep = shared_prepared();
  std::string bb_path;
  for (const auto& e : fs::directory_iterator(prep.plan.cache_dir))
    if (e.path().filename().string().rfind("backbone_", 0) == 0)
      bb_path = e.path().string();
  REQUIRE(!bb_path.empty());
  Params backbone = load_params_file<float>(bb_path);
  for (int i : {0, 5, 11}) {
    TapeF tape(false);
    Tensor img = Tensor::zeros({1, 3, 128, 128});
    std::copy_n(prep.dataset[static_cast<size_t>(i)].pixels.data(), img.numel(), img.data());
    auto c = backbone_forward(tape, backbone, tape.constant(img), false);
    for (int f = 0; f < 3; f++) {
      const auto& live = c[static_cast<size_t>(f)]->value;
      const Tensor& cached = prep.features[static_cast<size_t>(i)][static_cast<size_t>(f)];
      REQUIRE(live.numel() == cached.numel());
      for (size_t j = 0; j < cached.numel(); j++) REQUIRE(live[j] == cached[j]);
    }
  }
}

TEST_CASE("training from the cache beats recomputing the backbone by 3x or more") {
  const PreparedTask& prep = shared_prepared();
  SearchPlan plan = prep.plan;
  std::string bb_path;
  for (const auto& e : fs::directory_iterator(plan.cache_dir))
    if (e.path().filename().string().rfind("backbone_", 0) == 0)
      bb_path = e.path().string();
  Params backbone = load_params_file<float>(bb_path);
  DecoderGraph g = compile_with_original_head(
      decode_fpn(fpn_tokens(sample_uniform(*(new Rng(3))))), prep.backbone_spec,
      {plan.fpn_width, plan.fpn_width}, plan.num_classes, plan.compile_options());
  Rng rng(4);
  Params params = init_params(g, rng);
  const int iters = 12;
  // decoder-only step on cached features
  double cached_t = time_secs([&] {
    for (int it = 1; it <= iters; it++) {
      TapeF tape;
      std::vector<Tensor> inputs;
      for (int f = 0; f < 3; f++) {
        const Tensor& src = prep.features[0][static_cast<size_t>(f)];
        inputs.push_back(src.reshaped({1, src.dim(0), src.dim(1), src.dim(2)}));
      }
      ForwardResult fr = forward(tape, g, params, inputs, true);
      LossValues lv = build_losses(tape, fr.preds, 0, prep.targets[0]);
      tape.backward(lv.total);
      adam_step<float>(params, collect_grads(fr), 1e-3f, 0.9f, 0.999f, 1e-8f, it);
    }
  });
  // same step but running the frozen backbone forward every iteration
  double live_t = time_secs([&] {
    for (int it = 1; it <= iters; it++) {
      TapeF tape;
      Tensor img = Tensor::zeros({1, 3, 128, 128});
      std::copy_n(prep.dataset[0].pixels.data(), img.numel(), img.data());
      auto c = backbone_forward(tape, backbone, tape.constant(img), false);
      ForwardResult fr = forward_values(tape, g, params, {c[0], c[1], c[2]}, true);
      LossValues lv = build_losses(tape, fr.preds, 0, prep.targets[0]);
      tape.backward(lv.total);
      adam_step<float>(params, collect_grads(fr), 1e-3f, 0.9f, 0.999f, 1e-8f, it);
    }
  });
  INFO("cached ", cached_t, "s vs live ", live_t, "s");
  CHECK(live_t >= 3.0 * cached_t);
}

TEST_CASE("evaluate_job is deterministic, non-positive, and parallelism independent") {
  const PreparedTask& prep = shared_prepared();
  Rng rng(5);
  std::vector<EvalJob> jobs;
  for (int i = 0; i < 6; i++) {
    EvalJob j;
    j.seq = i;
    j.stage = SearchStage::FpnOnly;
    j.tokens = fpn_tokens(sample_uniform(rng));
    j.seed = Rng::derive(prep.plan.seed, static_cast<uint64_t>(i));
    jobs.push_back(j);
  }
  EvalOutcome once = evaluate_job(prep, prep.plan, jobs[0]);
  EvalOutcome twice = evaluate_job(prep, prep.plan, jobs[0]);
  REQUIRE(once.status == "ok");
  CHECK(once.reward == twice.reward);
  CHECK(once.reward <= 0.0);

  LocalEvalService serial(prep, 1);
  LocalEvalService parallel(prep, 2);
  auto a = serial.run(jobs);
  auto b = parallel.run(jobs);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); i++) {
    CHECK(a[i].seq == b[i].seq);
    CHECK(a[i].reward == b[i].reward);
  }
}

TEST_CASE("a blown-up learning rate is recorded as divergence, not a crash") {
  // finite blowups get renormalized by the norm layers and the probability
  // clamps, so force a genuine NaN through the optimizer
  const PreparedTask& prep = shared_prepared();
  SearchPlan hot = prep.plan;
  hot.adam_lr = std::numeric_limits<double>::infinity();
  Rng rng(6);
  EvalJob job;
  job.seq = 0;
  job.stage = SearchStage::FpnOnly;
  job.tokens = fpn_tokens(sample_uniform(rng));
  job.seed = 1;
  EvalOutcome o = evaluate_job(prep, hot, job);
  CHECK(o.status == "diverged");
  CHECK(o.reward == kDivergedReward);
}

TEST_CASE("head-stage evaluations never touch the fpn forward path once prefetched") {
  const PreparedTask& prep = shared_prepared();
  Rng rng(7);
  EvalJob warm;
  warm.seq = 100;
  warm.stage = SearchStage::HeadOnly;
  warm.tokens = head_tokens(sample_uniform(rng));
  warm.fpn_seed = Rng::derive(prep.plan.seed, 0xF9);
  warm.seed = 2;
  REQUIRE(evaluate_job(prep, prep.plan, warm).status == "ok");
  uint64_t before = fpn_forward_count();
  for (int i = 0; i < 3; i++) {
    EvalJob job = warm;
    job.seq = 101 + i;
    job.tokens = head_tokens(sample_uniform(rng));
    job.seed = static_cast<uint64_t>(3 + i);
    REQUIRE(evaluate_job(prep, prep.plan, job).status == "ok");
  }
  CHECK(fpn_forward_count() == before);
}

TEST_CASE("top_k ranks by reward with earlier sequence winning ties") {
  std::vector<SearchRecord> recs;
  for (int i = 0; i < 5; i++) {
    SearchRecord r;
    r.seq = i;
    r.stage = "fpn";
    r.reward = i == 2 ? -1.0 : -2.0;
    r.status = i == 4 ? "diverged" : "ok";
    recs.push_back(r);
  }
  auto top = top_k(recs, "fpn", 3);
  REQUIRE(top.size() == 3);
  CHECK(top[0].seq == 2);
  CHECK(top[1].seq == 0);  // tie at -2.0 resolved by earlier seq
  CHECK(top[2].seq == 1);
}

TEST_CASE("sharing_trend counts fully shared heads per window") {
  std::vector<SearchRecord> recs;
  for (int i = 0; i < 120; i++) {
    SearchRecord r;
    r.seq = i;
    r.stage = "head";
    r.tokens = {0, 0, 0, 0, 0, 0, i % 2 == 0 ? 0 : 3};
    recs.push_back(r);
  }
  auto trend = sharing_trend(recs, 50);
  REQUIRE(trend.size() == 2);  // floor(120/50)
  CHECK(trend[0] == doctest::Approx(0.5));
  CHECK(trend[1] == doctest::Approx(0.5));
  std::vector<SearchRecord> all_shared = recs;
  for (auto& r : all_shared) r.tokens.back() = 0;
  auto t2 = sharing_trend(all_shared, 50);
  for (double v : t2) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("spearman handles perfect, inverted, and tied rankings") {
  std::vector<double> a{1, 2, 3, 4, 5};
  std::vector<double> up{10, 20, 30, 40, 50};
  std::vector<double> down{5, 4, 3, 2, 1};
  CHECK(spearman_rho(a, up) == doctest::Approx(1.0));
  CHECK(spearman_rho(a, down) == doctest::Approx(-1.0));
  std::vector<double> tied{1, 1, 2, 2, 3};
  CHECK(spearman_rho(tied, tied) == doctest::Approx(1.0));
}

TEST_CASE("records serialize to stable jsonl and back") {
  SearchRecord r;
  r.seq = 7;
  r.stage = "head";
  r.tokens = {1, 2, 3, 4, 5, 6, 0};
  r.reward = -12.5;
  r.cls = 3.25;
  r.reg = 6.0;
  r.ctr = 3.25;
  r.macs = 123456;
  r.params = 789;
  std::string line = r.to_json().dump();
  SearchRecord back = SearchRecord::from_json(nlohmann::json::parse(line));
  CHECK(back.seq == r.seq);
  CHECK(back.tokens == r.tokens);
  CHECK(back.reward == r.reward);
  CHECK(back.to_json().dump() == line);
}

TEST_CASE("progressive search writes a log, selects top-k, and resumes byte-identically") {
  const PreparedTask& prep = shared_prepared();
  LocalEvalService svc(prep, 2);

  std::string full_dir = fresh_dir("run_full");
  SearchResult full = run_progressive_search(prep, svc, full_dir);
  REQUIRE(full.log.size() == 24);  // 12 fpn + 12 head
  for (size_t i = 0; i < full.log.size(); i++)
    CHECK(full.log[i].seq == static_cast<int64_t>(i));
  CHECK(full.top_fpn.size() == 4);
  CHECK(full.top_head.size() == 3);
  CHECK(full.top_fpn[0].reward >= full.top_fpn[1].reward);

  // interrupted run: stop once 9 jobs were issued, then resume
  std::string part_dir = fresh_dir("run_part");
  SearchResult part = run_progressive_search(
      prep, svc, part_dir, [](int64_t seq) { return seq < 9; });
  CHECK(part.log.size() < 24);
  SearchResult resumed = run_progressive_search(prep, svc, part_dir);
  REQUIRE(resumed.log.size() == 24);

  std::ifstream fa(full_dir + "/search.jsonl"), fb(part_dir + "/search.jsonl");
  std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  for (size_t i = 0; i < resumed.log.size(); i++)
    CHECK(resumed.log[i].seq == static_cast<int64_t>(i));  // contiguous across resume
}

TEST_CASE("correlation_study replays quantile-spaced picks and reports rho") {
  const PreparedTask& prep = shared_prepared();
  LocalEvalService svc(prep, 2);
  std::string dir = fresh_dir("run_corr");
  SearchResult res = run_progressive_search(prep, svc, dir);
  CorrelationResult corr = correlation_study(prep, res.log, &res, 5, 30);
  CHECK(corr.points.size() >= 4);
  CHECK(corr.spearman >= -1.0);
  CHECK(corr.spearman <= 1.0);
  // a 30-iteration replay may legitimately leave every AP at zero
  if (corr.degenerate) CHECK(corr.spearman == 0.0);
  // picks span the reward range: first pick near the bottom, last near the top
  double lo = 1e300, hi = -1e300;
  for (const auto& r : res.log)
    if (r.status == "ok") {
      lo = std::min(lo, r.reward);
      hi = std::max(hi, r.reward);
    }
  double plo = 1e300, phi = -1e300;
  for (const auto& p : corr.points) {
    plo = std::min(plo, p.reward);
    phi = std::max(phi, p.reward);
  }
  CHECK(plo == doctest::Approx(lo));
  CHECK(phi == doctest::Approx(hi));
}

TEST_CASE("backbone divergence aborts preparation with a diagnostic") {
  SearchPlan plan = tiny_plan("diverge");
  plan.backbone_lr = 1e9;
  CHECK_THROWS_WITH_AS(prepare(plan), doctest::Contains("diverged"), Error);
}

TEST_CASE("space modes restrict which token positions the search mutates") {
  const PreparedTask& prep = shared_prepared();
  SearchPlan base = prep.plan;

  SearchPlan fonly = base;
  fonly.space_mode = "f";
  fonly.archs_fpn = 6;
  PreparedTask pf = prepare(fonly);
  LocalEvalService sf(pf, 2);
  SearchResult rf = run_progressive_search(pf, sf, fresh_dir("run_fonly"));
  REQUIRE(rf.log.size() == 6);
  for (const auto& r : rf.log) {
    CHECK(r.stage == "fpn");
    CHECK(r.tokens.size() == 35);  // head tokens never touched
  }

  SearchPlan honly = base;
  honly.space_mode = "h";
  honly.archs_head = 6;
  PreparedTask ph = prepare(honly);
  LocalEvalService sh(ph, 2);
  SearchResult rh = run_progressive_search(ph, sh, fresh_dir("run_honly"));
  REQUIRE(rh.log.size() == 6);
  for (const auto& r : rh.log) {
    CHECK(r.stage == "head");
    CHECK(r.tokens.size() == 7);  // fpn tokens never touched
  }

  // the progressive two-stage mode covers all 42 positions across stages
  LocalEvalService sboth(prep, 2);
  SearchResult rfh = run_progressive_search(prep, sboth, fresh_dir("run_fh_probe"));
  size_t fpn_len = 0, head_len = 0;
  for (const auto& r : rfh.log) {
    if (r.stage == "fpn") fpn_len = r.tokens.size();
    if (r.stage == "head") head_len = r.tokens.size();
  }
  CHECK(fpn_len + head_len == 42);
}

TEST_CASE("50 optimization steps halve the loss on a fixed batch") {
  const PreparedTask& prep = shared_prepared();
  DecoderGraph g = original_fcos_decoder(prep.backbone_spec, {8, 8},
                                         prep.plan.num_classes,
                                         prep.plan.compile_options());
  Rng rng(9);
  Params params = init_params(g, rng);
  std::vector<int> batch{prep.train_idx[0], prep.train_idx[1]};
  auto inputs = [&] {
    std::vector<Tensor> in;
    for (int f = 0; f < 3; f++) {
      const Tensor& a = prep.features[static_cast<size_t>(batch[0])][static_cast<size_t>(f)];
      const Tensor& b = prep.features[static_cast<size_t>(batch[1])][static_cast<size_t>(f)];
      Tensor t = Tensor::zeros({2, a.dim(0), a.dim(1), a.dim(2)});
      std::copy_n(a.data(), a.numel(), t.data());
      std::copy_n(b.data(), b.numel(), t.data() + a.numel());
      in.push_back(t);
    }
    return in;
  }();
  double first = 0, last = 0;
  for (int it = 1; it <= 50; it++) {
    TapeF tape;
    ForwardResult fr = forward(tape, g, params, inputs, true);
    TapeF::Value total = nullptr;
    for (int b = 0; b < 2; b++) {
      LossValues lv = build_losses(tape, fr.preds, b,
                                   prep.targets[static_cast<size_t>(batch[static_cast<size_t>(b)])]);
      total = total ? tape.add(total, lv.total) : lv.total;
    }
    TapeF::Value loss = tape.mul_scalar(total, 0.5f);
    if (it == 1) first = loss->value[0];
    last = loss->value[0];
    REQUIRE(std::isfinite(loss->value[0]));
    tape.backward(loss);
    adam_step<float>(params, collect_grads(fr), 5e-3f, 0.9f, 0.999f, 1e-8f, it);
  }
  INFO("loss ", first, " -> ", last);
  CHECK(last <= 0.5 * first);
}
