#include "nfcs/dispatcher.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <thread>

namespace nfcs {

namespace {

constexpr uint32_t kMaxFrame = 64u << 20;

std::pair<std::string, int> split_addr(const std::string& addr) {
  size_t colon = addr.rfind(':');
  NFCS_REQUIRE(colon != std::string::npos, "address '", addr, "' is not host:port");
  return {addr.substr(0, colon), std::stoi(addr.substr(colon + 1))};
}

nlohmann::json job_to_json(const EvalJob& job, const std::string& plan_hash,
                           const std::string& cache_id) {
  return {{"type", "job"},      {"job_id", job.seq},
          {"stage", stage_name(job.stage)}, {"tokens", job.tokens},
          {"fpn_tokens", job.fpn_tokens},   {"fpn_seed", job.fpn_seed},
          {"seed", job.seed},   {"compute_ap", job.compute_ap},
          {"plan_hash", plan_hash},         {"cache_id", cache_id}};
}

EvalJob job_from_json(const nlohmann::json& j) {
  EvalJob job;
  job.seq = j.at("job_id").get<int64_t>();
  job.stage = stage_from_name(j.at("stage").get<std::string>());
  job.tokens = j.at("tokens").get<std::vector<int>>();
  job.fpn_tokens = j.at("fpn_tokens").get<std::vector<int>>();
  job.fpn_seed = j.at("fpn_seed").get<uint64_t>();
  job.seed = j.at("seed").get<uint64_t>();
  job.compute_ap = j.at("compute_ap").get<bool>();
  return job;
}

nlohmann::json outcome_to_json(const EvalOutcome& o) {
  return {{"type", "result"}, {"job_id", o.seq},   {"reward", o.reward},
          {"cls", o.val_losses.cls},               {"reg", o.val_losses.reg},
          {"ctr", o.val_losses.ctr},               {"toy_ap", o.toy_ap},
          {"macs", o.macs},   {"params", o.params}, {"status", o.status},
          {"wall_ms", o.wall_ms},                  {"worker", o.worker}};
}

EvalOutcome outcome_from_json(const nlohmann::json& j) {
  EvalOutcome o;
  o.seq = j.at("job_id").get<int64_t>();
  o.reward = j.at("reward").get<double>();
  o.val_losses.cls = j.at("cls").get<double>();
  o.val_losses.reg = j.at("reg").get<double>();
  o.val_losses.ctr = j.at("ctr").get<double>();
  o.toy_ap = j.at("toy_ap").get<double>();
  o.macs = j.at("macs").get<uint64_t>();
  o.params = j.at("params").get<uint64_t>();
  o.status = j.at("status").get<std::string>();
  o.wall_ms = j.at("wall_ms").get<uint64_t>();
  o.worker = j.at("worker").get<std::string>();
  return o;
}

}  // namespace

bool read_exact(int fd, void* buf, size_t n) {
  char* p = static_cast<char*>(buf);
  while (n > 0) {
    ssize_t r = ::recv(fd, p, n, 0);
    if (r <= 0) return false;
    p += r;
    n -= static_cast<size_t>(r);
  }
  return true;
}

bool write_all(int fd, const void* buf, size_t n) {
  const char* p = static_cast<const char*>(buf);
  while (n > 0) {
    ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w <= 0) return false;
    p += w;
    n -= static_cast<size_t>(w);
  }
  return true;
}

std::string encode_frame(const std::string& payload) {
  uint32_t len = htonl(static_cast<uint32_t>(payload.size()));
  std::string out(reinterpret_cast<const char*>(&len), 4);
  return out + payload;
}

bool send_frame(int fd, const nlohmann::json& msg) {
  std::string frame = encode_frame(msg.dump());
  return write_all(fd, frame.data(), frame.size());
}

std::optional<nlohmann::json> recv_frame(int fd, int timeout_ms) {
  if (timeout_ms >= 0) {
    pollfd pfd{fd, POLLIN, 0};
    int r = ::poll(&pfd, 1, timeout_ms);
    if (r <= 0) return std::nullopt;
  }
  uint32_t len_be = 0;
  if (!read_exact(fd, &len_be, 4)) return std::nullopt;
  uint32_t len = ntohl(len_be);
  if (len == 0 || len > kMaxFrame) return std::nullopt;  // malformed, drop
  std::string payload(len, '\0');
  if (!read_exact(fd, payload.data(), len)) return std::nullopt;
  nlohmann::json j = nlohmann::json::parse(payload, nullptr, false);
  if (j.is_discarded()) return std::nullopt;
  return j;
}

// ---------------------------------------------------------------------------
// coordinator

struct Coordinator::Impl {
  std::string plan_hash;
  std::string cache_id;
  int listen_fd = -1;
  int port = 0;
  std::thread accept_thread;
  std::vector<std::thread> handlers;

  std::mutex mu;
  std::condition_variable cv;
  bool closing = false;
  size_t n_workers = 0;
  std::vector<int> worker_fds;
  std::deque<EvalJob> pending;
  std::map<int64_t, EvalOutcome>* results = nullptr;  // set during run()
  std::chrono::steady_clock::time_point last_progress;
  std::vector<double> job_secs;  // completed durations, for the stall timeout

  int stall_timeout_ms() {
    if (job_secs.empty()) return 600'000;
    std::vector<double> s = job_secs;
    std::nth_element(s.begin(), s.begin() + s.size() / 2, s.end());
    double median = s[s.size() / 2];
    return std::max(2000, static_cast<int>(median * 10.0 * 1000.0));
  }

  void handle_worker(int fd, const std::string& name) {
    (void)name;
    for (;;) {
      EvalJob job;
      {
        std::unique_lock<std::mutex> lock(mu);
        cv.wait(lock, [&] { return closing || (!pending.empty() && results); });
        if (closing) break;
        job = pending.front();
        pending.pop_front();
      }
      if (!send_frame(fd, job_to_json(job, plan_hash, cache_id))) {
        std::lock_guard<std::mutex> lock(mu);
        pending.push_front(job);
        cv.notify_all();
        break;
      }
      auto t0 = std::chrono::steady_clock::now();
      int timeout;
      {
        std::lock_guard<std::mutex> lock(mu);
        timeout = stall_timeout_ms();
      }
      std::optional<nlohmann::json> reply = recv_frame(fd, timeout);
      std::lock_guard<std::mutex> lock(mu);
      if (!reply || !reply->contains("job_id")) {
        // dead, stalled or babbling worker: requeue and drop the connection
        pending.push_front(job);
        cv.notify_all();
        break;
      }
      EvalOutcome o = outcome_from_json(*reply);
      job_secs.push_back(
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
              .count());
      if (results && !results->count(o.seq)) {
        results->emplace(o.seq, std::move(o));  // first result wins
        last_progress = std::chrono::steady_clock::now();
      }
      cv.notify_all();
    }
    ::close(fd);
    std::lock_guard<std::mutex> lock(mu);
    n_workers--;
    cv.notify_all();
  }

  void accept_loop() {
    for (;;) {
      int fd = ::accept(listen_fd, nullptr, nullptr);
      if (fd < 0) break;  // listener closed
      std::optional<nlohmann::json> hello = recv_frame(fd, 10'000);
      if (!hello) {
        ::close(fd);
        continue;
      }
      std::string why;
      if (hello->value("type", "") != "hello" ||
          hello->value("proto", "") != kRpcProto)
        why = "protocol mismatch (want " + std::string(kRpcProto) + ")";
      else if (hello->value("plan_hash", "") != plan_hash)
        why = "plan hash mismatch";
      else if (hello->value("cache_id", "") != cache_id)
        why = "cache identity mismatch";
      if (!why.empty()) {
        send_frame(fd, {{"type", "reject"}, {"reason", why}});
        ::close(fd);
        continue;
      }
      std::string name = hello->value("name", "worker");
      send_frame(fd, {{"type", "hello_ok"}});
      std::lock_guard<std::mutex> lock(mu);
      if (closing) {
        ::close(fd);
        break;
      }
      n_workers++;
      worker_fds.push_back(fd);
      handlers.emplace_back(&Impl::handle_worker, this, fd, name);
      cv.notify_all();
    }
  }
};

Coordinator::Coordinator(const SearchPlan& plan, uint64_t cache_hash,
                         const std::string& bind_addr)
    : impl_(std::make_unique<Impl>()) {
  impl_->plan_hash = plan.hash();
  impl_->cache_id = std::to_string(cache_hash);
  auto [host, port] = split_addr(bind_addr);
  impl_->listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
  NFCS_REQUIRE(impl_->listen_fd >= 0, "cannot create listening socket");
  int yes = 1;
  setsockopt(impl_->listen_fd, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<uint16_t>(port));
  NFCS_REQUIRE(inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1,
               "bad bind host '", host, "'");
  NFCS_REQUIRE(::bind(impl_->listen_fd, reinterpret_cast<sockaddr*>(&addr),
                      sizeof(addr)) == 0,
               "cannot bind ", bind_addr);
  NFCS_REQUIRE(::listen(impl_->listen_fd, 16) == 0, "listen failed");
  socklen_t len = sizeof(addr);
  getsockname(impl_->listen_fd, reinterpret_cast<sockaddr*>(&addr), &len);
  impl_->port = ntohs(addr.sin_port);
  impl_->accept_thread = std::thread(&Impl::accept_loop, impl_.get());
}

Coordinator::~Coordinator() {
  {
    std::lock_guard<std::mutex> lock(impl_->mu);
    impl_->closing = true;
    for (int fd : impl_->worker_fds) ::shutdown(fd, SHUT_RDWR);
    impl_->cv.notify_all();
  }
  ::shutdown(impl_->listen_fd, SHUT_RDWR);
  ::close(impl_->listen_fd);
  if (impl_->accept_thread.joinable()) impl_->accept_thread.join();
  for (auto& t : impl_->handlers)
    if (t.joinable()) t.join();
}

int Coordinator::port() const { return impl_->port; }

size_t Coordinator::workers_connected() const {
  std::lock_guard<std::mutex> lock(impl_->mu);
  return impl_->n_workers;
}

void Coordinator::wait_for_workers(size_t n) {
  std::unique_lock<std::mutex> lock(impl_->mu);
  impl_->cv.wait(lock, [&] { return impl_->n_workers >= n; });
}

std::vector<EvalOutcome> Coordinator::run(const std::vector<EvalJob>& jobs) {
  std::map<int64_t, EvalOutcome> results;
  {
    std::unique_lock<std::mutex> lock(impl_->mu);
    NFCS_REQUIRE(!impl_->results, "coordinator already running a batch");
    impl_->cv.wait(lock, [&] { return impl_->n_workers > 0; });
    impl_->results = &results;
    impl_->last_progress = std::chrono::steady_clock::now();
    for (const EvalJob& j : jobs) impl_->pending.push_back(j);
    impl_->cv.notify_all();
  }
  {
    std::unique_lock<std::mutex> lock(impl_->mu);
    for (;;) {
      if (results.size() >= jobs.size()) break;
      if (impl_->n_workers == 0) {
        // stranded: give new workers a grace window, then fail loudly
        auto idle = std::chrono::steady_clock::now() - impl_->last_progress;
        if (idle > std::chrono::seconds(60)) {
          impl_->results = nullptr;
          impl_->pending.clear();
          fail("all workers disconnected with ", jobs.size() - results.size(),
               " jobs outstanding");
        }
      }
      impl_->cv.wait_for(lock, std::chrono::seconds(1));
    }
    impl_->results = nullptr;
    impl_->pending.clear();
  }
  std::vector<EvalOutcome> out;
  for (const EvalJob& j : jobs) {
    auto it = results.find(j.seq);
    NFCS_REQUIRE(it != results.end(), "job ", j.seq, " never produced a result");
    out.push_back(it->second);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const EvalOutcome& a, const EvalOutcome& b) { return a.seq < b.seq; });
  return out;
}

// ---------------------------------------------------------------------------
// worker

int run_worker(const SearchPlan& plan, const std::string& connect_addr,
               const std::string& worker_name) {
  PreparedTask prepared = prepare(plan);
  auto [host, port] = split_addr(connect_addr);
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  NFCS_REQUIRE(fd >= 0, "cannot create socket");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<uint16_t>(port));
  NFCS_REQUIRE(inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1,
               "bad host '", host, "'");
  // the coordinator may still be starting; retry briefly
  bool connected = false;
  for (int attempt = 0; attempt < 50 && !connected; attempt++) {
    connected = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0;
    if (!connected) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  NFCS_REQUIRE(connected, "cannot connect to ", connect_addr);

  send_frame(fd, {{"type", "hello"},
                  {"proto", kRpcProto},
                  {"plan_hash", plan.hash()},
                  {"cache_id", std::to_string(prepared.backbone_hash)},
                  {"name", worker_name}});
  std::optional<nlohmann::json> ack = recv_frame(fd, 30'000);
  NFCS_REQUIRE(ack && ack->value("type", "") == "hello_ok",
               "coordinator rejected the handshake: ",
               ack ? ack->value("reason", "no reason") : "no reply");

  int completed = 0;
  for (;;) {
    std::optional<nlohmann::json> msg = recv_frame(fd, -1);
    if (!msg) break;  // coordinator gone
    std::string type = msg->value("type", "");
    if (type == "shutdown") break;
    if (type != "job") continue;
    NFCS_REQUIRE(msg->value("plan_hash", "") == plan.hash(),
                 "job plan hash mismatch; refusing to evaluate");
    EvalJob job = job_from_json(*msg);
    EvalOutcome o = evaluate_job(prepared, plan, job);
    o.worker = worker_name;
    if (!send_frame(fd, outcome_to_json(o))) break;
    completed++;
  }
  ::close(fd);
  return completed;
}

}  // namespace nfcs
