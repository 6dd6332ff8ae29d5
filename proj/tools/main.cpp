// Command-line entry point for the decoder search engine: dataset/backbone
// preparation, progressive search, single-architecture evaluation, cost
// queries, reports, correlation and ablation studies, and worker mode.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "nfcs/dispatcher.hpp"
#include "nfcs/report.hpp"

using namespace nfcs;

namespace {

// exit codes: 0 ok, 2 usage/config, 3 missing cache, 4 invalid tokens,
// 5 runtime/numeric, 6 network
constexpr int kExitConfig = 2;
constexpr int kExitCache = 3;
constexpr int kExitTokens = 4;
constexpr int kExitRuntime = 5;
constexpr int kExitNetwork = 6;

std::vector<int> parse_tokens(const std::string& csv) {
  std::vector<int> out;
  std::string cur;
  for (char c : csv) {
    if (c == ',' || c == ' ') {
      if (!cur.empty()) out.push_back(std::stoi(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::stoi(cur));
  return out;
}

SearchPlan load_plan(const std::string& path, uint64_t seed_override,
                     int jobs_override, const std::string& cache_dir_override) {
  SearchPlan plan = path.empty() ? SearchPlan{} : SearchPlan::load(path);
  if (seed_override) plan.seed = seed_override;
  if (jobs_override > 0) plan.jobs = jobs_override;
  if (!cache_dir_override.empty()) plan.cache_dir = cache_dir_override;
  if (const char* env = std::getenv("NFCS_CACHE_DIR"); env && cache_dir_override.empty())
    plan.cache_dir = env;
  return plan;
}

int classify_cache_error(const Error& e) {
  return std::string(e.what()).find("prepare") != std::string::npos ? kExitCache
                                                                    : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reinforcement-learned decoder structure search"};
  app.require_subcommand(1);

  std::string plan_path, cache_dir, run_dir = "runs/default", log_path, out_dir = "report";
  std::string tokens_csv, hw = "1088x800", stage = "joint", connect, listen, name = "worker";
  std::string mode = "reward";
  uint64_t seed = 0;
  int jobs = 0, n_corr = 15, long_budget = 0, min_workers = 1;
  int fpn_width = 256, head_width = 256, classes = 80;
  std::string csv_out;

  auto* prepare_cmd = app.add_subcommand("prepare", "build dataset, backbone and feature cache");
  prepare_cmd->add_option("--plan", plan_path, "plan JSON file");
  prepare_cmd->add_option("--seed", seed, "override plan seed");
  prepare_cmd->add_option("--cache-dir", cache_dir, "cache directory");

  auto* search_cmd = app.add_subcommand("search", "run the progressive search");
  search_cmd->add_option("--plan", plan_path, "plan JSON file");
  search_cmd->add_option("--run-dir", run_dir, "output/run directory");
  search_cmd->add_option("--seed", seed, "override plan seed");
  search_cmd->add_option("--jobs", jobs, "local parallel evaluations");
  search_cmd->add_option("--cache-dir", cache_dir, "cache directory");
  search_cmd->add_option("--listen", listen, "serve evaluation jobs to workers on host:port");
  search_cmd->add_option("--min-workers", min_workers, "wait for this many workers");

  auto* eval_cmd = app.add_subcommand("eval-arch", "evaluate one token sequence");
  eval_cmd->add_option("--plan", plan_path, "plan JSON file");
  eval_cmd->add_option("--tokens", tokens_csv, "comma-separated tokens")->required();
  eval_cmd->add_option("--stage", stage, "fpn|head|joint");
  eval_cmd->add_option("--seed", seed, "evaluation seed");
  eval_cmd->add_option("--cache-dir", cache_dir, "cache directory");

  auto* cost_cmd = app.add_subcommand("cost", "analytic MACs/params for a decoder");
  cost_cmd->add_option("--tokens", tokens_csv, "42 comma-separated tokens")->required();
  cost_cmd->add_option("--hw", hw, "input size, e.g. 1088x800");
  cost_cmd->add_option("--fpn-width", fpn_width, "fpn channel width");
  cost_cmd->add_option("--head-width", head_width, "head channel width");
  cost_cmd->add_option("--classes", classes, "number of classes");
  cost_cmd->add_option("--csv", csv_out, "write the per-node breakdown CSV here");
  std::string dot_out;
  cost_cmd->add_option("--dot", dot_out, "write the compiled graph in DOT form here");

  auto* report_cmd = app.add_subcommand("report", "emit CSV/SVG report from a search log");
  report_cmd->add_option("--log", log_path, "search JSONL log")->required();
  report_cmd->add_option("--out-dir", out_dir, "report directory");

  auto* corr_cmd = app.add_subcommand("correlate", "reward vs toy-AP correlation study");
  corr_cmd->add_option("--plan", plan_path, "plan JSON file");
  corr_cmd->add_option("--run-dir", run_dir, "search run directory");
  corr_cmd->add_option("--n", n_corr, "architectures to replay");
  corr_cmd->add_option("--long-budget", long_budget, "replay training iterations");
  corr_cmd->add_option("--out-dir", out_dir, "report directory");
  corr_cmd->add_option("--cache-dir", cache_dir, "cache directory");

  auto* ablate_cmd = app.add_subcommand("ablate", "reward/space/deform ablation modes");
  ablate_cmd->add_option("--plan", plan_path, "plan JSON file");
  ablate_cmd->add_option("--mode", mode, "reward|space|deform");
  ablate_cmd->add_option("--run-dir", run_dir, "output directory");
  ablate_cmd->add_option("--jobs", jobs, "local parallel evaluations");
  ablate_cmd->add_option("--cache-dir", cache_dir, "cache directory");

  auto* worker_cmd = app.add_subcommand("worker", "serve evaluations for a coordinator");
  worker_cmd->add_option("--plan", plan_path, "plan JSON file");
  worker_cmd->add_option("--connect", connect, "coordinator host:port")->required();
  worker_cmd->add_option("--name", name, "worker name");
  worker_cmd->add_option("--cache-dir", cache_dir, "cache directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (prepare_cmd->parsed()) {
      SearchPlan plan = load_plan(plan_path, seed, jobs, cache_dir);
      PreparedTask prep = prepare(plan);
      std::cout << nlohmann::json{{"cache_hit", prep.cache_hit},
                                  {"images", prep.dataset.size()},
                                  {"train", prep.train_idx.size()},
                                  {"val", prep.val_idx.size()},
                                  {"backbone_hash", prep.backbone_hash},
                                  {"plan_hash", plan.hash()}}
                       .dump(2)
                << "\n";
      return 0;
    }

    if (search_cmd->parsed()) {
      SearchPlan plan = load_plan(plan_path, seed, jobs, cache_dir);
      PreparedTask prep;
      try {
        prep = prepare(plan, true);
      } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return classify_cache_error(e);
      }
      // the effective plan goes next to the log for reproducibility
      std::filesystem::create_directories(run_dir);
      std::ofstream pf(run_dir + "/plan.json");
      pf << plan.to_json().dump(2) << "\n";
      pf.close();
      SearchResult result;
      if (!listen.empty()) {
        try {
          Coordinator coord(plan, prep.backbone_hash, listen);
          std::cout << "listening on port " << coord.port() << "\n" << std::flush;
          coord.wait_for_workers(static_cast<size_t>(min_workers));
          result = run_progressive_search(prep, coord, run_dir);
        } catch (const Error& e) {
          std::cerr << "error: " << e.what() << "\n";
          return kExitNetwork;
        }
      } else {
        LocalEvalService svc(prep, plan.jobs);
        result = run_progressive_search(prep, svc, run_dir);
      }
      nlohmann::json out{{"records", result.log.size()},
                         {"log", run_dir + "/search.jsonl"}};
      if (!result.top_fpn.empty()) {
        out["best_fpn_reward"] = result.top_fpn[0].reward;
        out["best_fpn"] = pretty(decode_fpn(result.top_fpn[0].tokens));
      }
      if (!result.top_head.empty()) {
        out["best_head_reward"] = result.top_head[0].reward;
        out["best_head"] = pretty(decode_head(result.top_head[0].tokens));
      }
      std::cout << out.dump(2) << "\n";
      return 0;
    }

    if (eval_cmd->parsed()) {
      EvalJob job;
      try {
        job.tokens = parse_tokens(tokens_csv);
        job.stage = stage_from_name(stage);
        // decode eagerly so malformed tokens fail with position/vocab info
        if (job.stage == SearchStage::Joint) decode(job.tokens);
        if (job.stage == SearchStage::FpnOnly) decode_fpn(job.tokens);
        if (job.stage == SearchStage::HeadOnly) decode_head(job.tokens);
      } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitTokens;
      }
      SearchPlan plan = load_plan(plan_path, 0, jobs, cache_dir);
      PreparedTask prep;
      try {
        prep = prepare(plan, true);
      } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return classify_cache_error(e);
      }
      job.seq = 0;
      job.seed = seed ? seed : Rng::derive(plan.seed, 0);
      job.fpn_seed = Rng::derive(plan.seed, 0xF9);
      job.compute_ap = true;
      EvalOutcome o = evaluate_job(prep, plan, job);
      nlohmann::json pretty_j;
      if (job.stage == SearchStage::Joint) pretty_j = pretty(decode(job.tokens));
      if (job.stage == SearchStage::FpnOnly) pretty_j = pretty(decode_fpn(job.tokens));
      if (job.stage == SearchStage::HeadOnly) pretty_j = pretty(decode_head(job.tokens));
      std::cout << nlohmann::json{{"arch", pretty_j},
                                  {"reward", o.reward},
                                  {"cls", o.val_losses.cls},
                                  {"reg", o.val_losses.reg},
                                  {"ctr", o.val_losses.ctr},
                                  {"toy_ap", o.toy_ap},
                                  {"macs", o.macs},
                                  {"params", o.params},
                                  {"status", o.status},
                                  {"wall_ms", o.wall_ms}}
                       .dump(2)
                << "\n";
      return o.status == "ok" ? 0 : kExitRuntime;
    }

    if (cost_cmd->parsed()) {
      std::vector<int> tokens;
      DecoderConfig config;
      try {
        tokens = parse_tokens(tokens_csv);
        config = decode(tokens);
      } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitTokens;
      }
      size_t x = hw.find('x');
      if (x == std::string::npos) {
        std::cerr << "error: --hw wants WIDTHxHEIGHT, e.g. 1088x800\n";
        return kExitConfig;
      }
      int w = std::stoi(hw.substr(0, x)), h = std::stoi(hw.substr(x + 1));
      std::array<FeatureSpec, 3> spec{feature_at(h, w, 8, fpn_width),
                                      feature_at(h, w, 16, fpn_width),
                                      feature_at(h, w, 32, fpn_width)};
      DecoderGraph g = compile(config, spec, {fpn_width, head_width}, classes);
      CostReport r = cost(g);
      if (!csv_out.empty()) {
        std::ofstream f(csv_out);
        f << cost_csv(r);
      }
      if (!dot_out.empty()) {
        std::ofstream f(dot_out);
        f << to_dot(g);
      }
      std::cout << nlohmann::json{{"macs", r.macs},
                                  {"params", r.params},
                                  {"input", hw},
                                  {"nodes", r.rows.size()}}
                       .dump(2)
                << "\n";
      return 0;
    }

    if (report_cmd->parsed()) {
      std::vector<SearchRecord> log = read_jsonl(log_path);
      nlohmann::json summary = write_search_report(log, out_dir);
      std::cout << summary.dump(2) << "\n";
      return 0;
    }

    if (corr_cmd->parsed()) {
      SearchPlan plan = load_plan(plan_path, 0, jobs, cache_dir);
      PreparedTask prep;
      try {
        prep = prepare(plan, true);
      } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return classify_cache_error(e);
      }
      std::vector<SearchRecord> log = read_jsonl(run_dir + "/search.jsonl");
      SearchResult ctx;
      ctx.log = log;
      std::ifstream sf(run_dir + "/search.state.json");
      if (sf.good()) {
        nlohmann::json st = nlohmann::json::parse(sf);
        ctx.best_fpn_tokens = st.value("best_fpn_tokens", std::vector<int>{});
        ctx.best_fpn_seed = st.value("best_fpn_seed", 0ull);
      }
      int budget = long_budget > 0 ? long_budget : 4 * plan.proxy_iterations;
      CorrelationResult corr = correlation_study(prep, log, &ctx, n_corr, budget);
      write_correlation_report(corr, out_dir);
      std::cout << nlohmann::json{{"spearman", corr.spearman},
                                  {"points", corr.points.size()}}
                       .dump(2)
                << "\n";
      return 0;
    }

    if (ablate_cmd->parsed()) {
      SearchPlan plan = load_plan(plan_path, 0, jobs, cache_dir);
      PreparedTask prep;
      try {
        prep = prepare(plan, true);
      } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return classify_cache_error(e);
      }
      std::filesystem::create_directories(run_dir);
      if (mode == "deform") {
        AblationReport rep = deform_fpn_baseline(prep);
        std::ofstream f(run_dir + "/deform_baseline.json");
        f << rep.details.dump(2) << "\n";
        std::cout << rep.details.dump(2) << "\n";
        return 0;
      }
      if (mode == "reward" || mode == "space") {
        nlohmann::json out;
        std::vector<std::pair<std::string, SearchPlan>> variants;
        if (mode == "reward") {
          SearchPlan a = plan;
          a.reward_mode = "negloss";
          SearchPlan b = plan;
          b.reward_mode = "toyap";
          variants = {{"negloss", a}, {"toyap", b}};
        } else {
          for (const char* m : {"f", "h", "fh"}) {
            SearchPlan v = plan;
            v.space_mode = m;
            variants.emplace_back(m, v);
          }
        }
        for (auto& [vname, vplan] : variants) {
          PreparedTask vprep = prepare(vplan, true);
          LocalEvalService svc(vprep, vplan.jobs);
          SearchResult res =
              run_progressive_search(vprep, svc, run_dir + "/" + vname);
          nlohmann::json entry{{"records", res.log.size()}};
          if (!res.top_fpn.empty()) entry["best_fpn_reward"] = res.top_fpn[0].reward;
          if (!res.top_head.empty()) entry["best_head_reward"] = res.top_head[0].reward;
          out[vname] = entry;
        }
        std::ofstream f(run_dir + "/ablation_" + mode + ".json");
        f << out.dump(2) << "\n";
        std::cout << out.dump(2) << "\n";
        return 0;
      }
      std::cerr << "error: unknown ablation mode '" << mode << "'\n";
      return kExitConfig;
    }

    if (worker_cmd->parsed()) {
      SearchPlan plan = load_plan(plan_path, 0, 0, cache_dir);
      try {
        int done = run_worker(plan, connect, name);
        std::cout << nlohmann::json{{"completed", done}}.dump() << "\n";
        return 0;
      } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNetwork;
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
