#pragma once

#include <memory>
#include <string>

#include "nfcs/orchestrator.hpp"

namespace nfcs {

// Farm-out of evaluation jobs to worker processes over TCP. Frames are
// 4-byte big-endian length + UTF-8 JSON; the handshake pins the protocol
// revision, the plan hash and the cache identity, so a worker can only join
// a run whose inputs it can reproduce bit-for-bit. Jobs are at-least-once
// with idempotent ids; the first result for a job wins, so the result set is
// independent of worker count, crashes and arrival order.

constexpr const char* kRpcProto = "NFCS-RPC/1";

// Coordinator side. Accepts workers for the lifetime of the object and
// serves EvalService::run batches from the connected pool. A worker that
// disconnects or exceeds the stall timeout (10x the median completed job
// time) has its job requeued.
class Coordinator : public EvalService {
 public:
  // bind_addr is "host:port"; port 0 binds an ephemeral port.
  Coordinator(const SearchPlan& plan, uint64_t cache_hash,
              const std::string& bind_addr);
  ~Coordinator() override;

  int port() const;
  size_t workers_connected() const;
  // Blocks until at least n workers have completed the handshake.
  void wait_for_workers(size_t n);

  std::vector<EvalOutcome> run(const std::vector<EvalJob>& jobs) override;

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

// Worker side: prepares the task from the plan (hitting the shared cache),
// connects, and serves jobs until shutdown or connection loss.
// Returns the number of jobs completed.
int run_worker(const SearchPlan& plan, const std::string& connect_addr,
               const std::string& worker_name);

// frame plumbing, exposed for tests
std::string encode_frame(const std::string& payload);
bool read_exact(int fd, void* buf, size_t n);
bool write_all(int fd, const void* buf, size_t n);
bool send_frame(int fd, const nlohmann::json& msg);
// timeout < 0 waits forever; returns empty on EOF/timeout/malformed length
std::optional<nlohmann::json> recv_frame(int fd, int timeout_ms);

}  // namespace nfcs
