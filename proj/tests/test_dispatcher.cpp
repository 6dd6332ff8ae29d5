#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "nfcs/dispatcher.hpp"

using namespace nfcs;
namespace fs = std::filesystem;

#ifndef NFCS_CLI_PATH
#define NFCS_CLI_PATH ""
#endif

namespace {

SearchPlan worker_plan() {
  SearchPlan p;
  p.seed = 21;
  p.n_images = 16;
  p.proxy_batch = 2;
  p.proxy_iterations = 10;
  p.fpn_width = 8;
  p.head_width = 8;
  p.backbone_iterations = 25;
  p.backbone_batch = 2;
  p.cache_dir = (fs::temp_directory_path() / "nfcs_disp_cache").string();
  return p;
}

std::string write_plan(const SearchPlan& p, const std::string& name) {
  std::string path = (fs::temp_directory_path() / name).string();
  std::ofstream f(path);
  f << p.to_json().dump() << "\n";
  return path;
}

pid_t spawn_worker(const std::string& plan_path, int port, const std::string& name,
                   const std::string& cache_dir) {
  std::string addr = "127.0.0.1:" + std::to_string(port);
  pid_t pid = fork();
  if (pid == 0) {
    execl(NFCS_CLI_PATH, "nfcs", "worker", "--plan", plan_path.c_str(),
          "--connect", addr.c_str(), "--name", name.c_str(), "--cache-dir",
          cache_dir.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  return pid;
}

std::vector<EvalJob> make_jobs(const SearchPlan& plan, int n) {
  Rng rng(55);
  std::vector<EvalJob> jobs;
  for (int i = 0; i < n; i++) {
    EvalJob j;
    j.seq = i;
    j.stage = SearchStage::FpnOnly;
    j.tokens = fpn_tokens(sample_uniform(rng));
    j.seed = Rng::derive(plan.seed, static_cast<uint64_t>(i));
    jobs.push_back(j);
  }
  return jobs;
}

}  // namespace

TEST_CASE("frames round-trip over a socketpair, junk is rejected") {
  int fds[2];
  REQUIRE(socketpair(AF_UNIX, SOCK_STREAM, 0, fds) == 0);
  Rng rng(1);
  for (int i = 0; i < 200; i++) {
    nlohmann::json msg{{"type", "job"},
                       {"job_id", static_cast<int64_t>(rng.next_u64() % 1000)},
                       {"payload", std::string(rng.bounded(300), 'x')}};
    REQUIRE(send_frame(fds[0], msg));
    auto back = recv_frame(fds[1], 1000);
    REQUIRE(back.has_value());
    REQUIRE(*back == msg);
  }
  // oversized length prefix reads as malformed and returns nothing
  uint32_t huge = 0xFFFFFFFFu;
  REQUIRE(write_all(fds[0], &huge, 4));
  CHECK(!recv_frame(fds[1], 200).has_value());
  close(fds[0]);
  close(fds[1]);

  int fds2[2];
  REQUIRE(socketpair(AF_UNIX, SOCK_STREAM, 0, fds2) == 0);
  std::string not_json = encode_frame("this is { not json");
  REQUIRE(write_all(fds2[0], not_json.data(), not_json.size()));
  CHECK(!recv_frame(fds2[1], 200).has_value());
  close(fds2[0]);
  close(fds2[1]);
}

TEST_CASE("one loopback worker reproduces the in-process result set") {
  REQUIRE(std::string(NFCS_CLI_PATH) != "");
  SearchPlan plan = worker_plan();
  fs::remove_all(plan.cache_dir);
  PreparedTask prep = prepare(plan);
  std::string plan_path = write_plan(plan, "nfcs_disp_plan.json");

  std::vector<EvalJob> jobs = make_jobs(plan, 20);
  LocalEvalService local(prep, 2);
  std::vector<EvalOutcome> want = local.run(jobs);

  Coordinator coord(plan, prep.backbone_hash, "127.0.0.1:0");
  pid_t w = spawn_worker(plan_path, coord.port(), "w1", plan.cache_dir);
  coord.wait_for_workers(1);
  std::vector<EvalOutcome> got = coord.run(jobs);

  REQUIRE(got.size() == want.size());
  for (size_t i = 0; i < got.size(); i++) {
    CHECK(got[i].seq == want[i].seq);
    CHECK(got[i].status == want[i].status);
    CHECK(got[i].reward == doctest::Approx(want[i].reward).epsilon(1e-6));
    CHECK(got[i].worker == "w1");
  }
  kill(w, SIGTERM);
  waitpid(w, nullptr, 0);
}

TEST_CASE("a worker with a mismatched plan is rejected at the handshake") {
  REQUIRE(std::string(NFCS_CLI_PATH) != "");
  SearchPlan plan = worker_plan();
  PreparedTask prep = prepare(plan);
  Coordinator coord(plan, prep.backbone_hash, "127.0.0.1:0");

  SearchPlan other = plan;
  other.proxy_iterations = 11;  // different plan hash, same cache
  std::string other_path = write_plan(other, "nfcs_disp_plan_other.json");
  pid_t w = spawn_worker(other_path, coord.port(), "w2", plan.cache_dir);
  int status = 0;
  waitpid(w, &status, 0);
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 6);  // network/handshake error class
  CHECK(coord.workers_connected() == 0);
}

TEST_CASE("killing a worker mid-run loses no jobs and duplicates no results") {
  REQUIRE(std::string(NFCS_CLI_PATH) != "");
  SearchPlan plan = worker_plan();
  PreparedTask prep = prepare(plan);
  std::string plan_path = write_plan(plan, "nfcs_disp_plan.json");

  std::vector<EvalJob> jobs = make_jobs(plan, 12);
  LocalEvalService local(prep, 2);
  std::vector<EvalOutcome> want = local.run(jobs);

  Coordinator coord(plan, prep.backbone_hash, "127.0.0.1:0");
  pid_t w1 = spawn_worker(plan_path, coord.port(), "w1", plan.cache_dir);
  pid_t w2 = spawn_worker(plan_path, coord.port(), "w2", plan.cache_dir);
  coord.wait_for_workers(2);

  std::thread killer([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(600));
    kill(w2, SIGKILL);
  });
  std::vector<EvalOutcome> got = coord.run(jobs);
  killer.join();

  REQUIRE(got.size() == jobs.size());
  std::set<int64_t> seen;
  for (const EvalOutcome& o : got) {
    CHECK(!seen.count(o.seq));
    seen.insert(o.seq);
  }
  for (size_t i = 0; i < got.size(); i++)
    CHECK(got[i].reward == doctest::Approx(want[i].reward).epsilon(1e-6));
  kill(w1, SIGTERM);
  waitpid(w1, nullptr, 0);
  waitpid(w2, nullptr, 0);
}

TEST_CASE("a full search served through the coordinator matches the local run") {
  REQUIRE(std::string(NFCS_CLI_PATH) != "");
  SearchPlan plan = worker_plan();
  plan.archs_fpn = 6;
  plan.archs_head = 6;
  plan.controller_batch = 6;
  plan.top_k_fpn = 3;
  plan.top_k_head = 3;
  PreparedTask prep = prepare(plan);
  std::string plan_path = write_plan(plan, "nfcs_disp_search_plan.json");

  std::string local_dir = (fs::temp_directory_path() / "nfcs_disp_local").string();
  fs::remove_all(local_dir);
  LocalEvalService local(prep, 2);
  run_progressive_search(prep, local, local_dir);

  std::string remote_dir = (fs::temp_directory_path() / "nfcs_disp_remote").string();
  fs::remove_all(remote_dir);
  Coordinator coord(plan, prep.backbone_hash, "127.0.0.1:0");
  pid_t w = spawn_worker(plan_path, coord.port(), "w1", plan.cache_dir);
  coord.wait_for_workers(1);
  run_progressive_search(prep, coord, remote_dir);
  kill(w, SIGTERM);
  waitpid(w, nullptr, 0);

  auto slurp = [](const std::string& p) {
    std::ifstream f(p);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  std::string a = slurp(local_dir + "/search.jsonl");
  std::string b = slurp(remote_dir + "/search.jsonl");
  REQUIRE(!a.empty());
  CHECK(a == b);
}
